//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use bimflow_core::align::providers::{EmbeddingRow, FixtureEmbedder, FixtureTranslator};
use bimflow_core::io::{group_into_sessions, parse_log_stream, read_jsonl, LogFormat};
use bimflow_core::{Category, LogEntry, Prefix, RawSession};
use chrono::{TimeZone, Utc};
use rand::Rng;

pub mod criteria;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub const EMBED_DIM: usize = 9;

pub fn translator() -> FixtureTranslator {
    FixtureTranslator::load(&fixture("translations.jsonl")).unwrap()
}

pub fn embedding_rows() -> Vec<EmbeddingRow> {
    read_jsonl(&fixture("embeddings.jsonl")).unwrap()
}

/// Alignment-table vectors; other texts fall back to hashed bag-of-words vectors.
pub fn embedder() -> FixtureEmbedder {
    let mut e = FixtureEmbedder::from_rows(embedding_rows(), EMBED_DIM).unwrap();
    e.stub_fallback = true;
    e
}

pub fn log_compare_sessions() -> Vec<RawSession> {
    let f = std::fs::File::open(fixture("log_compare.jsonl")).unwrap();
    let (entries, report) = parse_log_stream(f, LogFormat::Jsonl).unwrap();
    assert_eq!(report.rejected, 0);
    group_into_sessions(entries)
}

/// Golden rows `(session, "Prefix: message")`.
pub fn golden(name: &str) -> Vec<(String, String)> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, k) = l.split_once('\t').expect("tab-separated golden row");
            (s.to_string(), k.to_string())
        })
        .collect()
}

pub fn rows_of(sessions: &[RawSession]) -> Vec<(String, String)> {
    sessions
        .iter()
        .flat_map(|s| s.entries.iter().map(move |e| (s.session_id.clone(), e.key())))
        .collect()
}

pub fn entry(session: &str, t: i64, prefix: Prefix, message: &str) -> LogEntry {
    let category = match prefix {
        Prefix::Menu => Category::Menu,
        Prefix::UndoEvent | Prefix::RedoEvent => Category::Undo,
        _ => Category::Tool,
    };
    LogEntry {
        session_id: session.into(),
        timestamp: Utc.timestamp_millis_opt(1_714_986_000_000 + t).unwrap(),
        category,
        prefix,
        message: message.into(),
        command_id: 0,
        language: "en".into(),
    }
}

// ---------------------------------------------------------------------------
// Undo/redo: a user simulator with explicit undo and redo stacks. The stacks
// are the ground truth; the generated log is what the software would write.

pub struct UndoCase {
    pub session: RawSession,
    /// Indices of the actions alive at the end of the session.
    pub alive: Vec<usize>,
}

const ACTION_NAMES: [&str; 5] = ["Wall", "Door", "Slab", "Roof", "Window"];

pub fn random_undo_session(rng: &mut impl Rng, len: usize) -> UndoCase {
    let mut entries = Vec::with_capacity(len);
    let mut undo_stack: Vec<usize> = Vec::new();
    let mut redo_stack: Vec<usize> = Vec::new();
    // Undone actions that a new action made unreachable for redo.
    let mut stale = 0usize;
    for t in 0..len {
        let i = entries.len();
        let roll: f64 = rng.random();
        let payload = |rng: &mut dyn rand::RngCore, name: &str, generic: &str| -> String {
            if rng.random_bool(0.2) {
                generic.to_string()
            } else {
                name.to_string()
            }
        };
        if roll < 0.5 {
            let name = ACTION_NAMES[rng.random_range(0..ACTION_NAMES.len())];
            entries.push(entry("u", t as i64, Prefix::Tool, name));
            undo_stack.push(i);
            stale += redo_stack.len();
            redo_stack.clear();
        } else if roll < 0.8 {
            match undo_stack.pop() {
                Some(target) => {
                    let name = entries[target].message.clone();
                    let p = payload(rng, &name, "Undo");
                    entries.push(entry("u", t as i64, Prefix::UndoEvent, &p));
                    redo_stack.push(target);
                }
                None => {
                    let name = ACTION_NAMES[rng.random_range(0..ACTION_NAMES.len())];
                    entries.push(entry("u", t as i64, Prefix::UndoEvent, name));
                }
            }
        } else {
            match redo_stack.pop() {
                Some(target) => {
                    let name = entries[target].message.clone();
                    let p = payload(rng, &name, "Redo");
                    entries.push(entry("u", t as i64, Prefix::RedoEvent, &p));
                    undo_stack.push(target);
                }
                // A redo with nothing to redo is only a no-op for the log
                // when no stale undone action could be mistaken for it.
                None if stale == 0 => {
                    entries.push(entry("u", t as i64, Prefix::RedoEvent, "Redo"));
                }
                None => {}
            }
        }
    }
    let mut alive = undo_stack;
    alive.sort_unstable();
    UndoCase { session: RawSession::new("u", entries), alive }
}

// ---------------------------------------------------------------------------
// Association statistics by direct counting.

pub struct BruteStats {
    pub total: u64,
    pub items: BTreeMap<String, u64>,
    pub pairs: BTreeMap<(String, String), u64>,
}

pub fn brute_stats(sessions: &[RawSession], window: usize) -> BruteStats {
    let mut items = BTreeMap::new();
    let mut total = 0;
    for s in sessions {
        for e in &s.entries {
            *items.entry(e.key()).or_insert(0) += 1;
            total += 1;
        }
    }
    let keys: BTreeSet<String> = items.keys().cloned().collect();
    let mut pairs = BTreeMap::new();
    for x in &keys {
        for y in &keys {
            let mut n = 0;
            for s in sessions {
                let es = &s.entries;
                for i in 0..es.len() {
                    if es[i].key() != *x || !es[i].prefix.is_high_level() {
                        continue;
                    }
                    let mut hit = false;
                    for j in i + 1..es.len().min(i + 1 + window) {
                        if es[j].prefix.is_high_level() {
                            break;
                        }
                        hit |= es[j].key() == *y;
                    }
                    n += hit as u64;
                }
            }
            if n > 0 {
                pairs.insert((x.clone(), y.clone()), n);
            }
        }
    }
    BruteStats { total, items, pairs }
}

pub fn random_arm_corpus(rng: &mut impl Rng, sessions: usize, max_len: usize) -> Vec<RawSession> {
    let highs = [(Prefix::Tool, "Wall"), (Prefix::Tool, "Door"), (Prefix::Menu, "Save"), (Prefix::Menu, "Copy")];
    let lows = [
        (Prefix::Event, "Create Wall"),
        (Prefix::Event, "Create Object"),
        (Prefix::EndEvent, "Create Object"),
        (Prefix::EndEvent, "Modify"),
    ];
    (0..sessions)
        .map(|s| {
            let n = rng.random_range(0..=max_len);
            let entries = (0..n)
                .map(|t| {
                    let (p, m) = if rng.random_bool(0.35) {
                        highs[rng.random_range(0..highs.len())]
                    } else {
                        lows[rng.random_range(0..lows.len())]
                    };
                    entry(&format!("s{s}"), t as i64, p, m)
                })
                .collect();
            RawSession::new(format!("s{s}"), entries)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Workflow merging, restated: recount every pair from scratch and rewrite the
// corpus with a single scan per sequence.

pub fn reference_merges(corpus: &[Vec<String>], num_merges: usize) -> Vec<(String, String)> {
    let mut corpus = corpus.to_vec();
    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut counts: Vec<((String, String), usize)> = Vec::new();
        for seq in &corpus {
            for i in 1..seq.len() {
                let p = (seq[i - 1].clone(), seq[i].clone());
                match counts.iter_mut().find(|(q, _)| *q == p) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((p, 1)),
                }
            }
        }
        let Some(max) = counts.iter().map(|(_, n)| *n).max() else { break };
        let best = counts.into_iter().filter(|(_, n)| *n == max).map(|(p, _)| p).min().unwrap();
        for seq in &mut corpus {
            let mut out = Vec::new();
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == best.0 && seq[i + 1] == best.1 {
                    out.push(format!("{}; {}", best.0, best.1));
                    i += 2;
                } else {
                    out.push(seq[i].clone());
                    i += 1;
                }
            }
            *seq = out;
        }
        merges.push(best);
    }
    merges
}

pub fn random_token_corpus(rng: &mut impl Rng, alphabet: usize, sessions: usize, max_len: usize) -> Vec<Vec<String>> {
    (0..sessions)
        .map(|_| {
            let n = rng.random_range(0..=max_len);
            (0..n).map(|_| format!("c{}", rng.random_range(0..alphabet))).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ranking metrics by sorting everything.

pub fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

pub fn brute_recall(scores: &[f64], target: usize, k: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    if order.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

pub fn brute_ndcg(scores: &[f64], target: usize, k: usize) -> f64 {
    let r = brute_rank(scores, target);
    let dcg = if r <= k { 1.0 / (r as f64 + 1.0).log2() } else { 0.0 };
    // One relevant item: the ideal list puts it first.
    let idcg = 1.0 / 2f64.log2();
    dcg / idcg
}

/// Mean cross-entropy over labeled rows, straight from the definition.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (row, y) in logits.iter().zip(labels) {
        let Some(y) = *y else { continue };
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        sum += -(row[y].exp() / z).ln();
        n += 1;
    }
    sum / n as f64
}
