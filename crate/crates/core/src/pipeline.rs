//! The preprocessing bundle shared by batch processing and live sessions,
//! and the batch composition track → align → dedupe → features.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::providers::Translator;
use crate::align::AlignmentDictionary;
use crate::augment::bpe::BpeModel;
use crate::augment::features::{compute_features, Step};
use crate::error::{io_err, CoreError, Result};
use crate::flow::{filter_irrelevant, resolve_undo_redo, FilterRules};
use crate::model::batch::StepInput;
use crate::redundancy::{mapping_keep, CommandMapping, DedupeReport};
use crate::types::{LogEntry, RawSession, Vocabulary};

const MANIFEST: &str = "bundle.json";
const RULES: &str = "rules.toml";
const DICTIONARY: &str = "dictionary.jsonl";
const MAPPING: &str = "mapping.jsonl";
const WORKFLOWS: &str = "workflows.json";
const VOCABULARY: &str = "vocabulary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    window: usize,
    vocabulary_hash: String,
}

/// Everything the preprocessing stages need, loaded once and shared.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub rules: FilterRules,
    pub dictionary: AlignmentDictionary,
    pub mapping: CommandMapping,
    pub window: usize,
    pub bpe: BpeModel,
    pub vocabulary: Vocabulary,
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = Manifest { window: self.window, vocabulary_hash: self.vocabulary.hash() };
        write_json(&dir.join(MANIFEST), &manifest)?;
        let rules = dir.join(RULES);
        fs::write(&rules, self.rules.to_toml()).map_err(io_err(rules))?;
        self.dictionary.save(&dir.join(DICTIONARY))?;
        self.mapping.save(&dir.join(MAPPING))?;
        write_json(&dir.join(WORKFLOWS), &self.bpe)?;
        write_json(&dir.join(VOCABULARY), &self.vocabulary)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        let vocabulary: Vocabulary = read_json(&dir.join(VOCABULARY))?;
        if vocabulary.hash() != manifest.vocabulary_hash {
            return Err(CoreError::Container(format!(
                "bundle vocabulary hash {} does not match its manifest ({})",
                vocabulary.hash(),
                manifest.vocabulary_hash
            )));
        }
        Ok(Bundle {
            rules: FilterRules::load(&dir.join(RULES))?,
            dictionary: AlignmentDictionary::load(&dir.join(DICTIONARY))?,
            mapping: CommandMapping::load(&dir.join(MAPPING))?,
            window: manifest.window,
            bpe: read_json(&dir.join(WORKFLOWS))?,
            vocabulary,
        })
    }

    /// Fails with a skew error unless `hash` names this bundle's vocabulary.
    pub fn check_vocabulary(&self, hash: &str) -> Result<()> {
        let own = self.vocabulary.hash();
        if own != hash {
            return Err(CoreError::VocabularySkew { checkpoint: hash.to_string(), bundle: own });
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Dictionary lookups with a private cache for pairs the dictionary lacks.
/// The shared dictionary is never written.
#[derive(Debug, Clone, Default)]
pub struct AlignCache {
    late: HashMap<(String, i64), String>,
}

impl AlignCache {
    pub fn canonical(&mut self, dict: &AlignmentDictionary, e: &LogEntry, translator: &dyn Translator) -> Result<String> {
        if let Some(c) = dict.canonical(&e.message, e.command_id) {
            return Ok(c.to_string());
        }
        let key = (e.message.clone(), e.command_id);
        if let Some(c) = self.late.get(&key) {
            return Ok(c.clone());
        }
        let t = translator.translate(&e.message, &e.language)?.text;
        self.late.insert(key, t.clone());
        Ok(t)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Processed {
    /// Canonical entries that survived tracking and deduplication.
    pub entries: Vec<LogEntry>,
    /// Featureized steps after workflow merging.
    pub steps: Vec<Step>,
}

/// Batch preprocessing of one session. `open_tail` keeps a trailing
/// high-level entry whose trigger window is still open, which is what a
/// stream observer must do.
pub fn process_session(bundle: &Bundle, session: &RawSession, translator: &dyn Translator, open_tail: bool) -> Result<Processed> {
    let (tracked, _) = resolve_undo_redo(&filter_irrelevant(session, &bundle.rules, None));
    let mut cache = AlignCache::default();
    let mut aligned = Vec::with_capacity(tracked.len());
    for e in &tracked.entries {
        let mut e = e.clone();
        e.message = cache.canonical(&bundle.dictionary, &e, translator)?;
        aligned.push(e);
    }
    Ok(dedupe_and_featureize(bundle, aligned, open_tail))
}

pub(crate) fn dedupe_and_featureize(bundle: &Bundle, aligned: Vec<LogEntry>, open_tail: bool) -> Processed {
    let keep = mapping_keep(&aligned, &bundle.mapping, bundle.window, open_tail, &mut DedupeReport::default());
    let mut entries = Vec::with_capacity(keep.len());
    let mut taken = aligned.into_iter().map(Some).collect::<Vec<_>>();
    for i in keep {
        entries.push(taken[i].take().expect("indices are unique"));
    }
    let session = RawSession::new(String::new(), entries);
    let steps = bundle.bpe.encode_steps(&compute_features(&session));
    Processed { entries: session.entries, steps }
}

/// Model inputs for steps in the vocabulary. Unknown steps are skipped and
/// their interval carries into the next known step.
pub fn step_inputs(steps: &[Step], vocab: &Vocabulary) -> Vec<StepInput> {
    let mut out: Vec<StepInput> = Vec::with_capacity(steps.len());
    let mut carry = 0.0;
    for s in steps {
        match vocab.id(&s.name) {
            Some(id) => {
                let dt = if out.is_empty() { s.dt } else { s.dt + carry };
                out.push(StepInput { id, dt, occurrences: s.occurrences as f64 });
                carry = 0.0;
            }
            None => carry += s.dt,
        }
    }
    out
}
