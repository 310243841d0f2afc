//! Live sessions: events arrive one at a time and the processed sequence is
//! kept equal to what the batch pipeline produces on the same events.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::align::providers::Translator;
use crate::augment::features::Step;
use crate::error::{CoreError, Result};
use crate::flow::{passes_static_rules, AbortTracker, UndoResolver};
use crate::model::checkpoint::Checkpoint;
use crate::model::infer::recommend_top_k;
use crate::pipeline::{dedupe_and_featureize, step_inputs, AlignCache, Bundle};
use crate::types::LogEntry;

/// Longest processed sequence a live session keeps; older steps are evicted.
pub const MAX_LIVE_STEPS: usize = 110;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    /// Position in the session's full processed history.
    pub index: usize,
    pub name: String,
    pub dt: f64,
    pub occurrences: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub added: Vec<StepView>,
    pub removed: Vec<StepView>,
    /// Processed length after the append.
    pub length: usize,
}

#[derive(Debug, Clone)]
pub struct LiveSession {
    pub id: String,
    events: Vec<LogEntry>,
    aborts: AbortTracker,
    passes: Vec<bool>,
    undo: UndoResolver,
    cache: AlignCache,
    steps: Vec<Step>,
    pub last_activity: DateTime<Utc>,
}

impl LiveSession {
    pub fn new(id: impl Into<String>, now: DateTime<Utc>) -> Self {
        LiveSession {
            id: id.into(),
            events: Vec::new(),
            aborts: AbortTracker::default(),
            passes: Vec::new(),
            undo: UndoResolver::new(),
            cache: AlignCache::default(),
            steps: Vec::new(),
            last_activity: now,
        }
    }

    pub fn events(&self) -> &[LogEntry] {
        &self.events
    }

    /// The processed sequence, at most [`MAX_LIVE_STEPS`] long.
    pub fn steps(&self) -> &[Step] {
        &self.steps[self.offset()..]
    }

    fn offset(&self) -> usize {
        self.steps.len().saturating_sub(MAX_LIVE_STEPS)
    }

    pub fn views(&self) -> Vec<StepView> {
        let off = self.offset();
        self.steps[off..].iter().enumerate().map(|(i, s)| view(off + i, s)).collect()
    }

    pub fn append(&mut self, bundle: &Bundle, translator: &dyn Translator, event: LogEntry, now: DateTime<Utc>) -> Result<Delta> {
        let i = self.events.len();
        self.passes.push(passes_static_rules(&event, &bundle.rules, None));
        self.events.push(event);
        let cancelled = self.aborts.push(&self.events);
        match cancelled {
            // The undo state saw an entry that is gone now: replay it.
            Some(j) if self.passes[j] => {
                self.undo = UndoResolver::new();
                for k in 0..=i {
                    if self.alive(k) {
                        self.undo.feed(k, &self.events[k]);
                    }
                }
            }
            _ if self.alive(i) => {
                self.undo.feed(i, &self.events[i]);
            }
            _ => {}
        }
        self.last_activity = now;
        self.rebuild(bundle, translator)
    }

    fn alive(&self, k: usize) -> bool {
        self.passes[k] && self.aborts.is_present(k)
    }

    fn rebuild(&mut self, bundle: &Bundle, translator: &dyn Translator) -> Result<Delta> {
        let mut aligned = Vec::new();
        for k in 0..self.events.len() {
            if self.alive(k) && !self.undo.is_removed(k) {
                let mut e = self.events[k].clone();
                e.message = self.cache.canonical(&bundle.dictionary, &e, translator)?;
                aligned.push(e);
            }
        }
        let steps = dedupe_and_featureize(bundle, aligned, true).steps;
        let common = self.steps.iter().zip(&steps).take_while(|(a, b)| a == b).count();
        let old_off = self.offset();
        let before = std::mem::replace(&mut self.steps, steps);
        let off = self.offset();
        // A visible step is unchanged when it is in the common prefix and
        // visible both before and after; everything else is in the delta,
        // including evictions and steps that scroll back into view.
        let kept = off.max(old_off)..common;
        let removed = (old_off..before.len())
            .filter(|k| !kept.contains(k))
            .map(|k| view(k, &before[k]))
            .collect();
        let added = (off..self.steps.len()).filter(|k| !kept.contains(k)).map(|k| view(k, &self.steps[k])).collect();
        Ok(Delta { added, removed, length: self.steps().len() })
    }
}

fn view(index: usize, s: &Step) -> StepView {
    StepView { index, name: s.name.clone(), dt: s.dt, occurrences: s.occurrences }
}

/// Concurrent session map; each session is locked on its own.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, now: DateTime<Utc>) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let s = Arc::new(Mutex::new(LiveSession::new(id.clone(), now)));
        self.sessions.write().expect("store lock").insert(id.clone(), s);
        id
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| CoreError::UnknownSession(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes sessions idle for at least `ttl`; returns how many.
    pub fn expire(&self, ttl: Duration, now: DateTime<Utc>) -> usize {
        let mut map = self.sessions.write().expect("store lock");
        let before = map.len();
        map.retain(|_, s| now - s.lock().expect("session lock").last_activity < ttl);
        before - map.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub command: String,
    pub probability: f64,
    pub is_workflow: bool,
    pub constituents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResponse {
    pub items: Vec<RecommendedItem>,
    pub version: String,
    pub latency_ms: f64,
}

/// A checkpoint paired with the preprocessing bundle it was trained with.
pub struct Engine {
    pub checkpoint: Checkpoint,
    pub bundle: Bundle,
    pub translator: Box<dyn Translator>,
    pub version: String,
}

impl Engine {
    /// Refuses a bundle whose vocabulary differs from the checkpoint's.
    pub fn new(checkpoint: Checkpoint, bundle: Bundle, translator: Box<dyn Translator>) -> Result<Self> {
        bundle.check_vocabulary(&checkpoint.vocabulary.hash())?;
        let version = checkpoint.version();
        Ok(Engine { checkpoint, bundle, translator, version })
    }

    pub fn append(&self, session: &mut LiveSession, event: LogEntry, now: DateTime<Utc>) -> Result<Delta> {
        session.append(&self.bundle, self.translator.as_ref(), event, now)
    }

    pub fn recommend(&self, steps: &[Step], k: usize) -> Result<RecommendationResponse> {
        let start = Instant::now();
        let vocab = &self.checkpoint.vocabulary;
        let inputs = step_inputs(steps, vocab);
        let recs = recommend_top_k(&self.checkpoint.model, &inputs, &self.checkpoint.norm, k)?;
        let items = recs
            .into_iter()
            .map(|r| {
                let item = vocab.get(r.id).expect("model ids are vocabulary ids");
                RecommendedItem {
                    command: item.name.clone(),
                    probability: r.probability,
                    is_workflow: item.is_workflow(),
                    constituents: item.constituents.clone(),
                }
            })
            .collect();
        Ok(RecommendationResponse {
            items,
            version: self.version.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1000.0,
        })
    }
}
