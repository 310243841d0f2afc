//! Markdown documentation chunking and nearest-chunk retrieval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::cluster::cosine;
use crate::align::providers::Embedder;
use crate::error::{io_err, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocChunk {
    /// File stem of the source document.
    pub doc_id: String,
    /// Position of the chunk within its document.
    pub part: usize,
    pub title: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub files: usize,
    pub chunks: usize,
    pub max_tokens: usize,
    pub mean_tokens: f64,
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn is_heading(line: &str) -> bool {
    let t = line.trim_start();
    let hashes = t.bytes().take_while(|&b| b == b'#').count();
    (1..=6).contains(&hashes) && t[hashes..].starts_with([' ', '\t', '\n', '\r'])
}

fn heading_title(text: &str) -> String {
    text.lines()
        .find(|l| is_heading(l))
        .map(|l| l.trim_start().trim_start_matches('#').trim().to_string())
        .unwrap_or_default()
}

/// Splits markdown into slices at heading lines, then splits any slice over
/// `budget` whitespace tokens at line (or, failing that, word) boundaries.
/// The returned slices concatenate back to `text`.
pub fn chunk_markdown(text: &str, budget: usize) -> Vec<&str> {
    let budget = budget.max(1);
    let mut sections = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if is_heading(line) && pos > start {
            sections.push(&text[start..pos]);
            start = pos;
        }
        pos += line.len();
    }
    if pos > start {
        sections.push(&text[start..pos]);
    }
    let mut out: Vec<&str> = Vec::new();
    for s in sections {
        split_budget(s, budget, &mut out);
    }
    // whitespace-only pieces join their neighbour so every chunk has content
    let mut merged: Vec<&str> = Vec::new();
    let mut carry: Option<usize> = None;
    let base = text.as_ptr() as usize;
    let span = |a: &str, b: &str| {
        let s = a.as_ptr() as usize - base;
        let e = b.as_ptr() as usize - base + b.len();
        &text[s..e]
    };
    for piece in out {
        if let Some(c) = carry.take() {
            let s = &text[c..piece.as_ptr() as usize - base];
            let joined = span(s, piece);
            merged.push(joined);
            continue;
        }
        if piece.trim().is_empty() {
            match merged.pop() {
                Some(prev) => merged.push(span(prev, piece)),
                None => carry = Some(piece.as_ptr() as usize - base),
            }
        } else {
            merged.push(piece);
        }
    }
    merged
}

fn split_budget<'a>(s: &'a str, budget: usize, out: &mut Vec<&'a str>) {
    if token_count(s) <= budget {
        out.push(s);
        return;
    }
    let mut start = 0;
    let mut count = 0;
    let mut pos = 0;
    for unit in s.split_inclusive('\n').flat_map(|l| l.split_inclusive(' ')) {
        let n = token_count(unit);
        if count + n > budget && pos > start {
            out.push(&s[start..pos]);
            start = pos;
            count = 0;
        }
        count += n;
        pos += unit.len();
    }
    if pos > start {
        out.push(&s[start..pos]);
    }
}

/// Reads every `*.md` file under `dir` (sorted by name), chunks and embeds it.
pub fn ingest_documentation(dir: &Path, budget: usize, embedder: &dyn Embedder) -> Result<(Vec<DocChunk>, ChunkStats)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "md"))
        .collect();
    files.sort();
    let mut docs = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(io_err(f))?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        docs.push((stem, text));
    }
    let chunks = chunk_documents(&docs, budget, embedder)?;
    if chunks.is_empty() {
        return Err(CoreError::Config(format!("no documentation chunks found in {}", dir.display())));
    }
    let tokens: Vec<usize> = chunks.iter().map(|c| token_count(&c.text)).collect();
    let stats = ChunkStats {
        files: files.len(),
        chunks: chunks.len(),
        max_tokens: tokens.iter().copied().max().unwrap_or(0),
        mean_tokens: tokens.iter().sum::<usize>() as f64 / tokens.len() as f64,
    };
    Ok((chunks, stats))
}

pub fn chunk_documents(docs: &[(String, String)], budget: usize, embedder: &dyn Embedder) -> Result<Vec<DocChunk>> {
    let mut out = Vec::new();
    for (doc_id, text) in docs {
        let mut title = String::new();
        for (part, piece) in chunk_markdown(text, budget).into_iter().enumerate() {
            let t = heading_title(piece);
            if !t.is_empty() {
                title = t;
            }
            out.push(DocChunk {
                doc_id: doc_id.clone(),
                part,
                title: title.clone(),
                text: piece.to_string(),
                embedding: embedder.embed(piece)?,
            });
        }
    }
    Ok(out)
}

/// Top-`k` chunks by cosine similarity to `embed(query)`; ties by document
/// order.
pub fn retrieve_context<'a>(query: &str, chunks: &'a [DocChunk], k: usize, embedder: &dyn Embedder) -> Result<Vec<&'a DocChunk>> {
    let q = embedder.embed(query)?;
    let mut scored: Vec<(f64, &DocChunk)> = chunks.iter().map(|c| (cosine(&q, &c.embedding), c)).collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
            .then_with(|| a.1.part.cmp(&b.1.part))
    });
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}
