//! Multilingual command alignment.

pub mod cluster;
pub mod providers;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::types::{LogEntry, RawSession};
use cluster::{dbscan, medoid, pairwise_mean_cosine, select_epsilon, EpsilonChoice, NOISE};
use providers::{Embedder, Translator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub similarity_threshold: f64,
    pub epsilon_range: (f64, f64),
    pub min_points: usize,
    pub epsilon_grid: usize,
    pub refine_iters: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            similarity_threshold: 0.82,
            epsilon_range: (0.1, 0.9),
            min_points: 2,
            epsilon_grid: 9,
            refine_iters: 20,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.epsilon_range;
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) || !(lo > 0.0 && lo < hi) {
            return Err(CoreError::Config(format!("invalid alignment config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DirectCentroid,
    SubCluster,
    NoiseSingleton,
    Late,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub name: String,
    pub id: i64,
    pub canonical: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentDictionary {
    entries: BTreeMap<(String, i64), DictEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub id: i64,
    pub members: usize,
    pub mean_cosine: f64,
    pub epsilon: Option<EpsilonChoice>,
    pub clusters: usize,
    pub noise: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub pairs: usize,
    pub groups: Vec<GroupReport>,
    pub untranslated: Vec<(String, i64)>,
}

impl AlignmentDictionary {
    pub fn get(&self, name: &str, id: i64) -> Option<&DictEntry> {
        self.entries.get(&(name.to_string(), id))
    }

    pub fn canonical(&self, name: &str, id: i64) -> Option<&str> {
        self.get(name, id).map(|e| e.canonical.as_str())
    }

    pub fn insert(&mut self, e: DictEntry) {
        self.entries.insert((e.name.clone(), e.id), e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DictEntry> {
        self.entries.values()
    }

    pub fn from_entries(rows: Vec<DictEntry>) -> Self {
        let mut d = AlignmentDictionary::default();
        for r in rows {
            d.insert(r);
        }
        d
    }

    /// Sorted JSONL, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries.values().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_entries(read_jsonl(path)?))
    }

    /// Canonical name for an entry, translating and recording unseen pairs
    /// with provenance `late`.
    pub fn resolve_or_insert(&mut self, e: &LogEntry, translator: &dyn Translator) -> Result<String> {
        if let Some(c) = self.canonical(&e.message, e.command_id) {
            return Ok(c.to_string());
        }
        let t = translator.translate(&e.message, &e.language)?;
        self.insert(DictEntry {
            name: e.message.clone(),
            id: e.command_id,
            canonical: t.text.clone(),
            provenance: Provenance::Late,
        });
        Ok(t.text)
    }
}

struct Pair {
    name: String,
    id: i64,
    lang: String,
}

fn collect_pairs(sessions: &[RawSession]) -> Vec<Pair> {
    let mut seen: BTreeMap<(String, i64), String> = BTreeMap::new();
    for s in sessions {
        for e in &s.entries {
            seen.entry((e.message.clone(), e.command_id)).or_insert_with(|| e.language.clone());
        }
    }
    seen.into_iter().map(|((name, id), lang)| Pair { name, id, lang }).collect()
}

/// Builds the dictionary: dedupe (name, id) pairs, group by id, translate and
/// embed, then either name the whole group after its medoid or split it with
/// DBSCAN and name each sub-cluster after its medoid.
pub fn build_alignment_dictionary(
    sessions: &[RawSession],
    config: &AlignmentConfig,
    translator: &dyn Translator,
    embedder: &dyn Embedder,
) -> Result<(AlignmentDictionary, AlignReport)> {
    config.validate()?;
    let pairs = collect_pairs(sessions);
    let mut report = AlignReport { pairs: pairs.len(), ..Default::default() };
    let mut by_id: BTreeMap<i64, Vec<&Pair>> = BTreeMap::new();
    for p in &pairs {
        by_id.entry(p.id).or_default().push(p);
    }
    let mut dict = AlignmentDictionary::default();
    for (id, members) in by_id {
        let mut translations = Vec::with_capacity(members.len());
        for p in &members {
            let t = translator.translate(&p.name, &p.lang)?;
            if !t.translated {
                report.untranslated.push((p.name.clone(), id));
            }
            translations.push(t.text);
        }
        let mut group = GroupReport { id, members: members.len(), ..Default::default() };
        let vectors: Result<Vec<Vec<f64>>> = translations.iter().map(|t| embed_checked(embedder, t)).collect();
        let vectors = match vectors {
            Ok(v) => v,
            Err(e @ CoreError::DimensionMismatch { .. }) => return Err(e),
            Err(e) => {
                group.error = Some(e.to_string());
                for (p, t) in members.iter().zip(&translations) {
                    dict.insert(entry(p, t, Provenance::NoiseSingleton));
                }
                report.groups.push(group);
                continue;
            }
        };
        group.mean_cosine = pairwise_mean_cosine(&vectors);
        if group.mean_cosine >= config.similarity_threshold {
            let all: Vec<usize> = (0..members.len()).collect();
            let name = &translations[all[medoid(&refs(&vectors, &all))]];
            for p in &members {
                dict.insert(entry(p, name, Provenance::DirectCentroid));
            }
            group.clusters = 1;
        } else {
            let choice = select_epsilon(
                &vectors,
                config.epsilon_range,
                config.min_points,
                config.epsilon_grid,
                config.refine_iters,
            );
            let labels = dbscan(&vectors, choice.eps, config.min_points);
            group.epsilon = Some(choice);
            group.clusters = cluster::cluster_count(&labels);
            for c in 0..group.clusters as i32 {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                let name = &translations[idx[medoid(&refs(&vectors, &idx))]];
                for &i in &idx {
                    dict.insert(entry(members[i], name, Provenance::SubCluster));
                }
            }
            for i in (0..labels.len()).filter(|&i| labels[i] == NOISE) {
                group.noise += 1;
                dict.insert(entry(members[i], &translations[i], Provenance::NoiseSingleton));
            }
        }
        report.groups.push(group);
    }
    Ok((dict, report))
}

fn refs<'a>(vs: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a Vec<f64>> {
    idx.iter().map(|&i| &vs[i]).collect()
}

fn entry(p: &Pair, canonical: &str, provenance: Provenance) -> DictEntry {
    DictEntry { name: p.name.clone(), id: p.id, canonical: canonical.to_string(), provenance }
}

fn embed_checked(embedder: &dyn Embedder, text: &str) -> Result<Vec<f64>> {
    let v = embedder.embed(text)?;
    if v.len() != embedder.dim() {
        return Err(CoreError::DimensionMismatch { got: v.len(), expected: embedder.dim() });
    }
    Ok(v)
}

/// Replaces every message with its canonical name. Unseen pairs go through
/// the translator and are added to the dictionary.
pub fn apply_alignment(
    sessions: &[RawSession],
    dict: &mut AlignmentDictionary,
    translator: &dyn Translator,
) -> Result<Vec<RawSession>> {
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut entries = Vec::with_capacity(s.len());
        for e in &s.entries {
            let mut e = e.clone();
            e.message = dict.resolve_or_insert(&e, translator)?;
            entries.push(e);
        }
        out.push(RawSession::new(s.session_id.clone(), entries));
    }
    Ok(out)
}

/// Canonical names present in a dictionary.
pub fn canonical_names(dict: &AlignmentDictionary) -> BTreeSet<String> {
    dict.entries().map(|e| e.canonical.clone()).collect()
}
