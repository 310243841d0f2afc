//! High-level → low-level trigger mining with support/confidence, and
//! collapsing of each user action to its high-level entry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::types::{LogEntry, RawSession};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    /// Maximum forward distance of a following low-level entry.
    pub window: usize,
    pub threshold: f64,
    pub top_n: usize,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig { window: 10, threshold: 0.4, top_n: 10 }
    }
}

/// Indices of the low-level entries following the high-level entry at `i`:
/// at most `window` entries ahead and before the next high-level entry.
pub fn following_lows(entries: &[LogEntry], i: usize, window: usize) -> std::ops::Range<usize> {
    let end = (i + window + 1).min(entries.len());
    let stop = (i + 1..end).find(|&j| entries[j].prefix.is_high_level()).unwrap_or(end);
    i + 1..stop
}

/// Whether the window after `i` can still grow when more entries arrive.
fn window_open(entries: &[LogEntry], i: usize, window: usize) -> bool {
    let r = following_lows(entries, i, window);
    r.end == entries.len() && r.len() < window
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationStats {
    pub pair_counts: HashMap<(String, String), u64>,
    pub item_counts: HashMap<String, u64>,
    pub total: u64,
    pub window: usize,
}

impl AssociationStats {
    /// Each (X, Y) pair counts once per occurrence of X.
    pub fn count<'a>(sessions: impl IntoIterator<Item = &'a RawSession>, window: usize) -> Self {
        let mut s = AssociationStats { window, ..Default::default() };
        for session in sessions {
            s.add(&session.entries);
        }
        s
    }

    pub fn add(&mut self, entries: &[LogEntry]) {
        for (i, e) in entries.iter().enumerate() {
            let key = e.key();
            *self.item_counts.entry(key.clone()).or_default() += 1;
            self.total += 1;
            if !e.prefix.is_high_level() {
                continue;
            }
            let lows: BTreeSet<String> = following_lows(entries, i, self.window).map(|j| entries[j].key()).collect();
            for y in lows {
                *self.pair_counts.entry((key.clone(), y)).or_default() += 1;
            }
        }
    }

    pub fn merge(&mut self, other: AssociationStats) {
        for (k, v) in other.pair_counts {
            *self.pair_counts.entry(k).or_default() += v;
        }
        for (k, v) in other.item_counts {
            *self.item_counts.entry(k).or_default() += v;
        }
        self.total += other.total;
    }

    fn check_total(&self) -> Result<()> {
        if self.total == 0 {
            return Err(CoreError::UndefinedStatistics("empty corpus (|D| = 0)".into()));
        }
        Ok(())
    }

    pub fn item_count(&self, x: &str) -> u64 {
        self.item_counts.get(x).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, x: &str, y: &str) -> u64 {
        self.pair_counts.get(&(x.to_string(), y.to_string())).copied().unwrap_or(0)
    }

    /// `(count(X), |D|)`
    pub fn support_ratio(&self, x: &str) -> Result<(u64, u64)> {
        self.check_total()?;
        Ok((self.item_count(x), self.total))
    }

    pub fn support(&self, x: &str) -> Result<f64> {
        let (a, b) = self.support_ratio(x)?;
        Ok(a as f64 / b as f64)
    }

    pub fn support_pair_ratio(&self, x: &str, y: &str) -> Result<(u64, u64)> {
        self.check_total()?;
        Ok((self.pair_count(x, y), self.total))
    }

    pub fn support_pair(&self, x: &str, y: &str) -> Result<f64> {
        let (a, b) = self.support_pair_ratio(x, y)?;
        Ok(a as f64 / b as f64)
    }

    /// `(count(X∩Y), count(X))`
    pub fn confidence_ratio(&self, x: &str, y: &str) -> Result<(u64, u64)> {
        self.check_total()?;
        let n = self.item_count(x);
        if n == 0 {
            return Err(CoreError::UndefinedStatistics(format!("support of `{x}` is 0")));
        }
        Ok((self.pair_count(x, y), n))
    }

    pub fn confidence(&self, x: &str, y: &str) -> Result<f64> {
        let (a, b) = self.confidence_ratio(x, y)?;
        Ok(a as f64 / b as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Auto,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRow {
    pub high: String,
    pub low: String,
    pub confidence: f64,
    pub status: ReviewStatus,
}

/// High-level item → following low-level items, sorted by confidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandMapping {
    rows: BTreeMap<String, Vec<MappingRow>>,
}

impl CommandMapping {
    pub fn from_rows(rows: Vec<MappingRow>) -> Self {
        let mut m = CommandMapping::default();
        for r in rows {
            m.rows.entry(r.high.clone()).or_default().push(r);
        }
        for list in m.rows.values_mut() {
            sort_rows(list);
        }
        m
    }

    pub fn rows(&self) -> impl Iterator<Item = &MappingRow> {
        self.rows.values().flatten()
    }

    pub fn candidates(&self, high: &str) -> &[MappingRow] {
        self.rows.get(high).map_or(&[], |v| v.as_slice())
    }

    /// Accepted lows for `high` (auto or approved).
    pub fn lows(&self, high: &str) -> impl Iterator<Item = &str> {
        self.candidates(high)
            .iter()
            .filter(|r| r.status != ReviewStatus::Rejected)
            .map(|r| r.low.as_str())
    }

    pub fn highs(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.rows().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rows(read_jsonl(path)?))
    }
}

fn sort_rows(list: &mut [MappingRow]) {
    list.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.low.cmp(&b.low)));
}

/// Manual-check hook; `None` auto-approves.
pub type Review<'a> = &'a mut dyn FnMut(&str, &str, f64) -> bool;

pub fn mine_mapping(stats: &AssociationStats, config: &ArmConfig, mut review: Option<Review<'_>>) -> Result<CommandMapping> {
    stats.check_total()?;
    let mut by_high: BTreeMap<&str, Vec<MappingRow>> = BTreeMap::new();
    for ((x, y), &n) in &stats.pair_counts {
        let conf = n as f64 / stats.item_count(x) as f64;
        if conf > config.threshold {
            by_high.entry(x.as_str()).or_default().push(MappingRow {
                high: x.clone(),
                low: y.clone(),
                confidence: conf,
                status: ReviewStatus::Auto,
            });
        }
    }
    let mut rows = Vec::new();
    for (_, mut list) in by_high {
        sort_rows(&mut list);
        list.truncate(config.top_n);
        for mut r in list {
            if let Some(cb) = review.as_mut() {
                r.status = if cb(&r.high, &r.low, r.confidence) {
                    ReviewStatus::Approved
                } else {
                    ReviewStatus::Rejected
                };
            }
            rows.push(r);
        }
    }
    Ok(CommandMapping::from_rows(rows))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupeReport {
    pub entries_in: usize,
    pub lows_removed: usize,
    pub incomplete_removed: usize,
    pub entries_out: usize,
}

/// Indices surviving mapping-based collapsing. With `open_tail`, a trailing
/// high-level entry whose window has not closed yet is kept.
pub fn mapping_keep(entries: &[LogEntry], mapping: &CommandMapping, window: usize, open_tail: bool, report: &mut DedupeReport) -> Vec<usize> {
    let mut remove = vec![false; entries.len()];
    for (i, e) in entries.iter().enumerate() {
        if !e.prefix.is_high_level() {
            continue;
        }
        let key = e.key();
        let lows: BTreeSet<&str> = mapping.lows(&key).collect();
        if lows.is_empty() {
            continue;
        }
        let mut found = false;
        for j in following_lows(entries, i, window) {
            if lows.contains(entries[j].key().as_str()) {
                remove[j] = true;
                found = true;
                report.lows_removed += 1;
            }
        }
        if !found && !(open_tail && window_open(entries, i, window)) {
            remove[i] = true;
            report.incomplete_removed += 1;
        }
    }
    report.entries_in += entries.len();
    let keep: Vec<usize> = (0..entries.len()).filter(|&i| !remove[i]).collect();
    report.entries_out += keep.len();
    keep
}

pub fn apply_mapping(sessions: &[RawSession], mapping: &CommandMapping, window: usize) -> (Vec<RawSession>, DedupeReport) {
    let mut report = DedupeReport::default();
    let out = sessions
        .iter()
        .map(|s| {
            let keep = mapping_keep(&s.entries, mapping, window, false, &mut report);
            RawSession::new(s.session_id.clone(), keep.into_iter().map(|i| s.entries[i].clone()).collect())
        })
        .collect();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Category, Prefix};
    use chrono::{TimeZone, Utc};

    fn e(prefix: Prefix, msg: &str) -> LogEntry {
        LogEntry {
            session_id: "s".into(),
            timestamp: Utc.timestamp_opt(0, 0).unwrap(),
            category: Category::Tool,
            prefix,
            message: msg.into(),
            command_id: 0,
            language: "en".into(),
        }
    }

    #[test]
    fn support_and_confidence_basics() {
        let mut entries = vec![];
        for _ in 0..4 {
            entries.push(e(Prefix::Tool, "X"));
            entries.push(e(Prefix::Event, "Y"));
        }
        entries[7] = e(Prefix::Event, "Z");
        let s = AssociationStats::count([&RawSession::new("s", entries)], 10);
        assert_eq!(s.support("Tool: X").unwrap(), 0.5);
        assert_eq!(s.support("Tool: Absent").unwrap(), 0.0);
        assert_eq!(s.confidence_ratio("Tool: X", "Event: Y").unwrap(), (3, 4));
        assert!(s.confidence("Tool: Absent", "Event: Y").is_err());
        assert!(AssociationStats::default().support("x").is_err());
    }

    #[test]
    fn twelve_candidates_truncate_to_ten() {
        let mut entries = vec![e(Prefix::Tool, "H")];
        for i in 0..12 {
            entries.push(e(Prefix::Event, &format!("L{i:02}")));
        }
        let s = AssociationStats::count([&RawSession::new("s", entries)], 20);
        let m = mine_mapping(&s, &ArmConfig { window: 20, ..Default::default() }, None).unwrap();
        assert_eq!(m.candidates("Tool: H").len(), 10);
    }

    #[test]
    fn unmapped_high_survives_and_incomplete_is_removed() {
        let m = CommandMapping::from_rows(vec![MappingRow {
            high: "Tool: Door Tool".into(),
            low: "Event: Create Door".into(),
            confidence: 0.9,
            status: ReviewStatus::Auto,
        }]);
        let s = RawSession::new("s", vec![e(Prefix::Tool, "Door Tool"), e(Prefix::Tool, "Wall")]);
        let (out, report) = apply_mapping(&[s], &m, 10);
        assert_eq!(out[0].entries.len(), 1);
        assert_eq!(out[0].entries[0].message, "Wall");
        assert_eq!(report.incomplete_removed, 1);
    }

    #[test]
    fn open_tail_keeps_a_pending_high() {
        let m = CommandMapping::from_rows(vec![MappingRow {
            high: "Tool: Wall".into(),
            low: "Event: Create Wall".into(),
            confidence: 0.9,
            status: ReviewStatus::Auto,
        }]);
        let entries = vec![e(Prefix::Tool, "Wall")];
        let mut r = DedupeReport::default();
        assert_eq!(mapping_keep(&entries, &m, 10, true, &mut r), vec![0]);
        assert!(mapping_keep(&entries, &m, 10, false, &mut r).is_empty());
    }
}
