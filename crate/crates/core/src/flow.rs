//! Recovers the actual modeling flow: irrelevance filtering followed by
//! undo/redo resolution.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::types::{LogEntry, Prefix, RawSession};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub dropped_prefixes: BTreeSet<Prefix>,
    /// Word sequences (case-insensitive) marking low-significance commands.
    pub low_significance_names: Vec<String>,
    /// Entries whose `"Prefix: message"` key occurs fewer times than this
    /// in the whole corpus are dropped. 0 or 1 disables the check.
    pub min_global_count: u64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            dropped_prefixes: [
                Prefix::DestroyEvent,
                Prefix::BeginInternalEvent,
                Prefix::BetaForEachAlert,
                Prefix::BetaUndoAlert,
                Prefix::ProjectSharingProblem,
                Prefix::UndoProblem,
                Prefix::UndoAndRemoveAction,
                Prefix::AbortEvent,
            ]
            .into_iter()
            .collect(),
            low_significance_names: ["zoom", "pan", "scroll", "fit-to-view"].map(String::from).to_vec(),
            min_global_count: 0,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RulesFile {
    #[serde(default)]
    filter: FilterRules,
}

impl FilterRules {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: RulesFile = toml::from_str(text).map_err(|e| CoreError::Config(format!("rules: {e}")))?;
        Ok(f.filter)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&RulesFile { filter: self.clone() }).expect("rules serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    fn is_low_significance(&self, message: &str) -> bool {
        let words = words_of(message);
        self.low_significance_names.iter().any(|pat| {
            let pat = words_of(pat);
            !pat.is_empty() && words.windows(pat.len()).any(|w| w == pat.as_slice())
        })
    }
}

fn words_of(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Corpus-wide key counts for the rarity rule.
#[derive(Debug, Clone, Default)]
pub struct RarityTable {
    counts: HashMap<String, u64>,
}

impl RarityTable {
    pub fn count<'a>(sessions: impl IntoIterator<Item = &'a RawSession>) -> Self {
        let mut t = RarityTable::default();
        for s in sessions {
            t.add(s);
        }
        t
    }

    pub fn add(&mut self, session: &RawSession) {
        for e in &session.entries {
            *self.counts.entry(e.key()).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: RarityTable) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
    }

    pub fn get(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }
}

/// Tracks entries cancelled by `Abort Event` markers. An abort removes itself
/// and the nearest preceding still-present `Event` with the same message.
#[derive(Debug, Clone, Default)]
pub struct AbortTracker {
    present: Vec<bool>,
}

impl AbortTracker {
    /// Feeds the next entry; returns the index it cancelled, if any.
    pub fn push(&mut self, entries: &[LogEntry]) -> Option<usize> {
        let i = self.present.len();
        let e = &entries[i];
        if e.prefix != Prefix::AbortEvent {
            self.present.push(true);
            return None;
        }
        self.present.push(false);
        let hit = (0..i)
            .rev()
            .find(|&j| self.present[j] && entries[j].prefix == Prefix::Event && entries[j].message == e.message);
        if let Some(j) = hit {
            self.present[j] = false;
        }
        hit
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }
}

/// Static per-entry rules (prefix, low significance, rarity).
pub fn passes_static_rules(e: &LogEntry, rules: &FilterRules, rarity: Option<&RarityTable>) -> bool {
    if e.prefix == Prefix::AbortEvent || rules.dropped_prefixes.contains(&e.prefix) {
        return false;
    }
    if rules.is_low_significance(&e.message) {
        return false;
    }
    match rarity {
        Some(t) if rules.min_global_count > 1 => t.get(&e.key()) >= rules.min_global_count,
        _ => true,
    }
}

/// Indices of entries that survive the irrelevance filter.
pub fn filter_indices(entries: &[LogEntry], rules: &FilterRules, rarity: Option<&RarityTable>) -> Vec<usize> {
    let mut aborts = AbortTracker::default();
    for _ in 0..entries.len() {
        aborts.push(entries);
    }
    (0..entries.len())
        .filter(|&i| aborts.is_present(i) && passes_static_rules(&entries[i], rules, rarity))
        .collect()
}

pub fn filter_irrelevant(session: &RawSession, rules: &FilterRules, rarity: Option<&RarityTable>) -> RawSession {
    let keep = filter_indices(&session.entries, rules, rarity);
    RawSession::new(
        session.session_id.clone(),
        keep.into_iter().map(|i| session.entries[i].clone()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndoKind {
    Normal,
    Undo,
    Redo,
}

pub fn undo_kind(e: &LogEntry) -> UndoKind {
    match e.prefix {
        Prefix::UndoEvent => UndoKind::Undo,
        Prefix::RedoEvent => UndoKind::Redo,
        _ => UndoKind::Normal,
    }
}

/// True when an undo/redo payload names no command, so matching falls back
/// to the most recent candidate.
pub fn is_generic_payload(message: &str) -> bool {
    let m = message.trim().to_ascii_lowercase();
    matches!(m.as_str(), "" | "undo" | "redo" | "undo event" | "redo event")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndoEffect {
    /// A normal command was recorded.
    Recorded,
    /// The undo entry and its target `target` are now removed.
    Undone { target: usize },
    /// Undo without a match; only the marker is removed.
    UnmatchedUndo,
    /// A previously undone command `target` is restored.
    Redone { target: usize },
    UnmatchedRedo,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndoReport {
    pub undos_matched: usize,
    pub undos_unmatched: usize,
    pub redos_matched: usize,
    pub redos_unmatched: usize,
}

/// The undo/redo state machine: two command lists and the set of indices
/// marked for removal, updated one entry at a time.
#[derive(Debug, Clone, Default)]
pub struct UndoResolver {
    recent_commands: Vec<(String, usize)>,
    recent_undone: Vec<(String, usize)>,
    to_remove: BTreeSet<usize>,
    pub report: UndoReport,
}

fn find_back(list: &[(String, usize)], name: &str) -> Option<usize> {
    if is_generic_payload(name) {
        return list.len().checked_sub(1);
    }
    list.iter().rposition(|(n, _)| n == name)
}

impl UndoResolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, idx: usize, entry: &LogEntry) -> UndoEffect {
        match undo_kind(entry) {
            UndoKind::Normal => {
                self.recent_commands.push((entry.message.clone(), idx));
                UndoEffect::Recorded
            }
            UndoKind::Undo => {
                self.to_remove.insert(idx);
                match find_back(&self.recent_commands, &entry.message) {
                    Some(pos) => {
                        let (name, target) = self.recent_commands.remove(pos);
                        self.to_remove.insert(target);
                        self.recent_undone.push((name, target));
                        self.report.undos_matched += 1;
                        UndoEffect::Undone { target }
                    }
                    None => {
                        self.report.undos_unmatched += 1;
                        UndoEffect::UnmatchedUndo
                    }
                }
            }
            UndoKind::Redo => {
                self.to_remove.insert(idx);
                match find_back(&self.recent_undone, &entry.message) {
                    Some(pos) => {
                        let (name, target) = self.recent_undone.remove(pos);
                        self.to_remove.remove(&target);
                        self.recent_commands.push((name, target));
                        self.report.redos_matched += 1;
                        UndoEffect::Redone { target }
                    }
                    None => {
                        self.report.redos_unmatched += 1;
                        UndoEffect::UnmatchedRedo
                    }
                }
            }
        }
    }

    pub fn is_removed(&self, idx: usize) -> bool {
        self.to_remove.contains(&idx)
    }

    pub fn to_remove(&self) -> &BTreeSet<usize> {
        &self.to_remove
    }
}

pub fn resolve_undo_redo(session: &RawSession) -> (RawSession, UndoReport) {
    let mut r = UndoResolver::new();
    for (i, e) in session.entries.iter().enumerate() {
        r.feed(i, e);
    }
    let entries = session
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !r.is_removed(*i))
        .map(|(_, e)| e.clone())
        .collect();
    (RawSession::new(session.session_id.clone(), entries), r.report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackReport {
    pub sessions: usize,
    pub entries_in: usize,
    pub after_filter: usize,
    pub entries_out: usize,
    pub undo: UndoReport,
}

impl TrackReport {
    fn absorb(&mut self, u: &UndoReport) {
        self.undo.undos_matched += u.undos_matched;
        self.undo.undos_unmatched += u.undos_unmatched;
        self.undo.redos_matched += u.redos_matched;
        self.undo.redos_unmatched += u.redos_unmatched;
    }
}

pub fn track_actual_flow(session: &RawSession, rules: &FilterRules, rarity: Option<&RarityTable>) -> (RawSession, UndoReport) {
    resolve_undo_redo(&filter_irrelevant(session, rules, rarity))
}

/// Two-pass corpus tracking: rarity counts first, then per-session tracking.
pub fn track_corpus(sessions: &[RawSession], rules: &FilterRules) -> (Vec<RawSession>, TrackReport) {
    let rarity = (rules.min_global_count > 1).then(|| RarityTable::count(sessions));
    let mut report = TrackReport { sessions: sessions.len(), ..Default::default() };
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        report.entries_in += s.len();
        let filtered = filter_irrelevant(s, rules, rarity.as_ref());
        report.after_filter += filtered.len();
        let (tracked, u) = resolve_undo_redo(&filtered);
        report.absorb(&u);
        report.entries_out += tracked.len();
        out.push(tracked);
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Category;
    use chrono::{TimeZone, Utc};

    pub(crate) fn entry(i: i64, prefix: Prefix, msg: &str) -> LogEntry {
        LogEntry {
            session_id: "s".into(),
            timestamp: Utc.timestamp_opt(1_700_000_000 + i, 0).unwrap(),
            category: Category::Tool,
            prefix,
            message: msg.into(),
            command_id: 0,
            language: "en".into(),
        }
    }

    fn names(s: &RawSession) -> Vec<String> {
        s.entries.iter().map(|e| e.key()).collect()
    }

    #[test]
    fn internal_events_only_filter_to_empty() {
        let s = RawSession::new("s", (0..3).map(|i| entry(i, Prefix::BeginInternalEvent, "Layers")).collect());
        assert!(filter_irrelevant(&s, &FilterRules::default(), None).is_empty());
    }

    #[test]
    fn zoom_is_low_significance() {
        let s = RawSession::new(
            "s",
            vec![entry(0, Prefix::Tool, "Wall"), entry(1, Prefix::Event, "Zoom"), entry(2, Prefix::Tool, "Door")],
        );
        let f = filter_irrelevant(&s, &FilterRules::default(), None);
        assert_eq!(names(&f), ["Tool: Wall", "Tool: Door"]);
        // whole-word match only
        assert!(!FilterRules::default().is_low_significance("Panel"));
        assert!(FilterRules::default().is_low_significance("Fit to View"));
    }

    #[test]
    fn abort_cancels_nearest_event() {
        let s = RawSession::new(
            "s",
            vec![
                entry(0, Prefix::Event, "Move"),
                entry(1, Prefix::Event, "Move"),
                entry(2, Prefix::AbortEvent, "Move"),
            ],
        );
        let keep = filter_indices(&s.entries, &FilterRules::default(), None);
        assert_eq!(keep, vec![0]);
    }

    #[test]
    fn undo_examples() {
        let run = |items: &[(Prefix, &str)]| {
            let s = RawSession::new("s", items.iter().enumerate().map(|(i, (p, m))| entry(i as i64, *p, m)).collect());
            resolve_undo_redo(&s).0.entries.iter().map(|e| e.message.clone()).collect::<Vec<_>>()
        };
        use Prefix::{RedoEvent as R, Tool as T, UndoEvent as U};
        assert_eq!(run(&[(T, "A"), (T, "B"), (U, "B")]), ["A"]);
        assert_eq!(run(&[(T, "A"), (U, "A"), (R, "A")]), ["A"]);
        assert_eq!(run(&[(T, "A"), (T, "B"), (U, "B"), (U, "A"), (R, "A"), (T, "C")]), ["A", "C"]);
        // generic payload falls back to the most recent command
        assert_eq!(run(&[(T, "A"), (T, "B"), (U, "Undo")]), ["A"]);
        // unmatched undo removes only itself
        assert_eq!(run(&[(T, "A"), (U, "Z")]), ["A"]);
    }

    #[test]
    fn rules_toml_round_trip() {
        let r = FilterRules::default();
        assert_eq!(FilterRules::from_toml(&r.to_toml()).unwrap(), r);
        let custom = FilterRules::from_toml("[filter]\nlow_significance_names = [\"orbit\"]\n").unwrap();
        assert_eq!(custom.low_significance_names, ["orbit"]);
        assert_eq!(custom.dropped_prefixes, r.dropped_prefixes);
    }
}
