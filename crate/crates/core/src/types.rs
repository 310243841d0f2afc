use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Tool,
    Menu,
    Undo,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Tool => "Tool",
            Category::Menu => "Menu",
            Category::Undo => "UNDO",
        }
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tool" => Ok(Category::Tool),
            "menu" => Ok(Category::Menu),
            "undo" => Ok(Category::Undo),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

/// The fourteen message prefixes of the native log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prefix {
    Tool,
    Menu,
    Event,
    EndEvent,
    DestroyEvent,
    RedoEvent,
    UndoEvent,
    AbortEvent,
    BeginInternalEvent,
    BetaForEachAlert,
    BetaUndoAlert,
    ProjectSharingProblem,
    UndoProblem,
    UndoAndRemoveAction,
}

impl Prefix {
    pub const ALL: [Prefix; 14] = [
        Prefix::Tool,
        Prefix::Menu,
        Prefix::Event,
        Prefix::EndEvent,
        Prefix::DestroyEvent,
        Prefix::RedoEvent,
        Prefix::UndoEvent,
        Prefix::AbortEvent,
        Prefix::BeginInternalEvent,
        Prefix::BetaForEachAlert,
        Prefix::BetaUndoAlert,
        Prefix::ProjectSharingProblem,
        Prefix::UndoProblem,
        Prefix::UndoAndRemoveAction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Prefix::Tool => "Tool",
            Prefix::Menu => "Menu",
            Prefix::Event => "Event",
            Prefix::EndEvent => "End Event",
            Prefix::DestroyEvent => "DestroyEvent",
            Prefix::RedoEvent => "Redo Event",
            Prefix::UndoEvent => "Undo Event",
            Prefix::AbortEvent => "Abort Event",
            Prefix::BeginInternalEvent => "Begin Internal Event",
            Prefix::BetaForEachAlert => "Beta ForEach Alert",
            Prefix::BetaUndoAlert => "Beta Undo Alert",
            Prefix::ProjectSharingProblem => "Project Sharing Problem",
            Prefix::UndoProblem => "Undo Problem",
            Prefix::UndoAndRemoveAction => "Undo and Remove Action",
        }
    }

    pub fn is_high_level(self) -> bool {
        matches!(self, Prefix::Tool | Prefix::Menu)
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Prefix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Prefix::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown prefix `{s}`"))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Category);
string_serde!(Prefix);

pub(crate) mod ts_millis {
    use super::*;

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses an RFC 3339 instant and truncates it to milliseconds.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    let t = DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("bad timestamp `{s}`: {e}"))?;
    let t = t.with_timezone(&Utc);
    Ok(DateTime::from_timestamp_millis(t.timestamp_millis()).expect("millis in range"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    #[serde(rename = "session")]
    pub session_id: String,
    #[serde(rename = "ts", with = "ts_millis")]
    pub timestamp: DateTime<Utc>,
    pub category: Category,
    pub prefix: Prefix,
    pub message: String,
    pub command_id: i64,
    #[serde(rename = "lang", default = "undetermined")]
    pub language: String,
}

fn undetermined() -> String {
    "und".to_string()
}

impl LogEntry {
    /// `"Prefix: message"`, the form used for association-rule items.
    pub fn key(&self) -> String {
        item_key(self.prefix, &self.message)
    }
}

pub fn item_key(prefix: Prefix, name: &str) -> String {
    format!("{}: {}", prefix.as_str(), name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    pub entries: Vec<LogEntry>,
}

impl RawSession {
    pub fn new(session_id: impl Into<String>, entries: Vec<LogEntry>) -> Self {
        RawSession {
            session_id: session_id.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
}

impl Level {
    pub fn of(prefixes: impl IntoIterator<Item = Prefix>) -> Level {
        if prefixes.into_iter().any(Prefix::is_high_level) {
            Level::High
        } else {
            Level::Low
        }
    }
}

/// One recommendable item: a canonical command or a merged workflow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabItem {
    pub name: String,
    pub level: Level,
    #[serde(default)]
    pub source_ids: BTreeSet<i64>,
    /// Constituent command names; non-empty only for workflows.
    #[serde(default)]
    pub constituents: Vec<String>,
}

impl VocabItem {
    pub fn command(name: impl Into<String>, level: Level) -> Self {
        VocabItem {
            name: name.into(),
            level,
            source_ids: BTreeSet::new(),
            constituents: Vec::new(),
        }
    }

    pub fn is_workflow(&self) -> bool {
        self.constituents.len() >= 2
    }
}

/// Closed item set with a dense `name ↔ 0..n` bijection.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    items: Vec<VocabItem>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: Vec<VocabItem>) -> Result<Self, String> {
        let mut v = Vocabulary::new();
        for item in items {
            v.push(item)?;
        }
        Ok(v)
    }

    pub fn push(&mut self, item: VocabItem) -> Result<u32, String> {
        if self.index.contains_key(&item.name) {
            return Err(format!("duplicate vocabulary item `{}`", item.name));
        }
        let id = self.items.len() as u32;
        self.index.insert(item.name.clone(), id);
        self.items.push(item);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: u32) -> Option<&VocabItem> {
        self.items.get(id as usize)
    }

    pub fn name(&self, id: u32) -> &str {
        &self.items[id as usize].name
    }

    pub fn items(&self) -> &[VocabItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// SHA-256 over item names and workflow constituents in id order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for item in &self.items {
            h.update(item.name.as_bytes());
            for c in &item.constituents {
                h.update([0x1f]);
                h.update(c.as_bytes());
            }
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.items.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let items = Vec::<VocabItem>::deserialize(d)?;
        Vocabulary::from_items(items).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes_round_trip_through_strings() {
        for p in Prefix::ALL {
            assert_eq!(p.as_str().parse::<Prefix>().unwrap(), p);
        }
        assert!("Bogus".parse::<Prefix>().is_err());
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = Vocabulary::from_items(vec![
            VocabItem::command("Wall", Level::High),
            VocabItem::command("Door", Level::High),
        ])
        .unwrap();
        assert_eq!(v.id("Door"), Some(1));
        assert_eq!(v.name(0), "Wall");
        assert!(Vocabulary::from_items(vec![
            VocabItem::command("Wall", Level::High),
            VocabItem::command("Wall", Level::Low),
        ])
        .is_err());
    }

    #[test]
    fn timestamps_keep_milliseconds() {
        let t = parse_timestamp("2024-03-01T10:00:00.123456+01:00").unwrap();
        assert_eq!(t.to_rfc3339_opts(SecondsFormat::Millis, true), "2024-03-01T09:00:00.123Z");
    }
}
