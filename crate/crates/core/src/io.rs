//! Log ingestion and the `BIMFLOW1` binary container.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::types::{parse_timestamp, LogEntry, RawSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jsonl" => Ok(LogFormat::Jsonl),
            "tsv" => Ok(LogFormat::Tsv),
            _ => Err(format!("unknown log format `{s}` (expected jsonl or tsv)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub read: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// First few rejection reasons, `(line number, reason)`.
    pub samples: Vec<(usize, String)>,
}

const MAX_SAMPLES: usize = 20;

#[derive(Deserialize)]
struct RawLine {
    session: String,
    ts: String,
    category: String,
    prefix: String,
    message: String,
    command_id: i64,
    #[serde(default)]
    lang: Option<String>,
}

impl RawLine {
    fn validate(self) -> std::result::Result<LogEntry, String> {
        let message = self.message.trim().to_string();
        if message.is_empty() {
            return Err("empty message".into());
        }
        if self.session.is_empty() {
            return Err("empty session id".into());
        }
        Ok(LogEntry {
            session_id: self.session,
            timestamp: parse_timestamp(&self.ts)?,
            category: self.category.parse()?,
            prefix: self.prefix.parse()?,
            message,
            command_id: self.command_id,
            language: self.lang.filter(|l| !l.trim().is_empty()).unwrap_or_else(|| "und".into()),
        })
    }
}

const TSV_COLUMNS: [&str; 7] = ["session", "ts", "category", "prefix", "message", "command_id", "lang"];

fn tsv_line(cols: &HashMap<&str, usize>, line: &str) -> std::result::Result<RawLine, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let get = |name: &str| -> std::result::Result<String, String> {
        let i = cols[name];
        fields
            .get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| format!("missing column `{name}`"))
    };
    Ok(RawLine {
        session: get("session")?,
        ts: get("ts")?,
        category: get("category")?,
        prefix: get("prefix")?,
        message: get("message")?,
        command_id: get("command_id")?
            .trim()
            .parse()
            .map_err(|e| format!("bad command_id: {e}"))?,
        lang: cols.get("lang").and_then(|&i| fields.get(i)).map(|s| s.to_string()),
    })
}

/// Parses a line-delimited log. Malformed lines are skipped and counted;
/// more than half rejected is reported as a format mismatch.
pub fn parse_log_stream<R: Read>(reader: R, format: LogFormat) -> Result<(Vec<LogEntry>, ParseReport)> {
    let mut report = ParseReport::default();
    let mut entries = Vec::new();
    let mut tsv_cols: Option<HashMap<&str, usize>> = None;
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if format == LogFormat::Tsv && tsv_cols.is_none() {
            let header: Vec<&str> = line.split('\t').map(str::trim).collect();
            let mut cols = HashMap::new();
            for c in TSV_COLUMNS {
                if let Some(i) = header.iter().position(|h| *h == c) {
                    cols.insert(c, i);
                } else if c != "lang" {
                    return Err(CoreError::FormatMismatch { format: "tsv", read: 1, rejected: 1 });
                }
            }
            tsv_cols = Some(cols);
            continue;
        }
        report.read += 1;
        let parsed = match format {
            LogFormat::Jsonl => serde_json::from_str::<RawLine>(&line).map_err(|e| e.to_string()),
            LogFormat::Tsv => tsv_line(tsv_cols.as_ref().unwrap(), &line),
        }
        .and_then(RawLine::validate);
        match parsed {
            Ok(e) => {
                report.accepted += 1;
                entries.push(e);
            }
            Err(reason) => {
                report.rejected += 1;
                if report.samples.len() < MAX_SAMPLES {
                    report.samples.push((n + 1, reason));
                }
            }
        }
    }
    if report.rejected * 2 > report.read {
        return Err(CoreError::FormatMismatch {
            format: match format {
                LogFormat::Jsonl => "jsonl",
                LogFormat::Tsv => "tsv",
            },
            read: report.read,
            rejected: report.rejected,
        });
    }
    Ok((entries, report))
}

/// Validates one event object for a live session, reporting every bad
/// field. `session` is optional and replaced by `session_id`.
pub fn event_from_json(v: &serde_json::Value, session_id: &str) -> Result<LogEntry> {
    use crate::error::FieldError;
    let mut errors = Vec::new();
    let mut fail = |field: &str, message: String| {
        errors.push(FieldError { field: field.to_string(), message });
    };
    let Some(obj) = v.as_object() else {
        fail("$", "expected a JSON object".into());
        return Err(CoreError::Validation(errors));
    };
    let text = |name: &str| obj.get(name).and_then(|x| x.as_str());
    let timestamp = match text("ts") {
        Some(ts) => parse_timestamp(ts).map_err(|e| fail("ts", e)).ok(),
        None => {
            fail("ts", "missing or not a string".into());
            None
        }
    };
    let category = match text("category") {
        Some(c) => c.parse().map_err(|e| fail("category", e)).ok(),
        None => {
            fail("category", "missing or not a string".into());
            None
        }
    };
    let prefix = match text("prefix") {
        Some(p) => p.parse().map_err(|e| fail("prefix", e)).ok(),
        None => {
            fail("prefix", "missing or not a string".into());
            None
        }
    };
    let message = match text("message").map(str::trim) {
        Some(m) if !m.is_empty() => Some(m.to_string()),
        Some(_) => {
            fail("message", "empty message".into());
            None
        }
        None => {
            fail("message", "missing or not a string".into());
            None
        }
    };
    let command_id = match obj.get("command_id") {
        None => Some(0),
        Some(x) => x.as_i64().or_else(|| {
            fail("command_id", "not an integer".into());
            None
        }),
    };
    let language = match obj.get("lang") {
        None | Some(serde_json::Value::Null) => "und".to_string(),
        Some(serde_json::Value::String(l)) if !l.trim().is_empty() => l.clone(),
        Some(serde_json::Value::String(_)) => "und".to_string(),
        Some(_) => {
            fail("lang", "not a string".into());
            String::new()
        }
    };
    match (timestamp, category, prefix, message, command_id) {
        (Some(timestamp), Some(category), Some(prefix), Some(message), Some(command_id)) if errors.is_empty() => Ok(LogEntry {
            session_id: session_id.to_string(),
            timestamp,
            category,
            prefix,
            message,
            command_id,
            language,
        }),
        _ => Err(CoreError::Validation(errors)),
    }
}

/// One session per distinct id in first-appearance order, entries stably
/// sorted by timestamp.
pub fn group_into_sessions(entries: impl IntoIterator<Item = LogEntry>) -> Vec<RawSession> {
    let mut order: Vec<RawSession> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for e in entries {
        let i = *index.entry(e.session_id.clone()).or_insert_with(|| {
            order.push(RawSession::new(e.session_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].entries.push(e);
    }
    for s in &mut order {
        s.entries.sort_by_key(|e| e.timestamp);
    }
    order
}

pub const MAGIC: &[u8; 8] = b"BIMFLOW1";
const MAGIC_STEM: &[u8; 7] = b"BIMFLOW";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    version: u32,
    header: H,
}

pub const CONTAINER_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| CoreError::Container(format!("record of {n} bytes is too large")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

/// Writes magic, a length-prefixed JSON header and length-prefixed records.
pub fn write_container<W: Write, H: Serialize>(
    w: &mut W,
    kind: &str,
    header: &H,
    records: impl IntoIterator<Item = Vec<u8>>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    let env = Envelope { kind: kind.to_string(), version: CONTAINER_VERSION, header };
    let json = serde_json::to_vec(&env)?;
    write_u32(w, json.len())?;
    w.write_all(&json)?;
    for r in records {
        write_u32(w, r.len())?;
        w.write_all(&r)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| CoreError::Container(format!("truncated {what}: {e}")))
}

/// Reads a container, checking the magic, version and kind.
pub fn read_container<R: Read, H: DeserializeOwned>(r: &mut R, kind: &str) -> Result<(H, Vec<Vec<u8>>)> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        if &magic[..7] == MAGIC_STEM {
            return Err(CoreError::VersionMismatch {
                found: String::from_utf8_lossy(&magic).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(CoreError::Container("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    read_exact_or(r, &mut len, "header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_or(r, &mut json, "header")?;
    let env: Envelope<serde_json::Value> = serde_json::from_slice(&json)?;
    if env.version != CONTAINER_VERSION {
        return Err(CoreError::VersionMismatch {
            found: env.version.to_string(),
            expected: CONTAINER_VERSION.to_string(),
        });
    }
    if env.kind != kind {
        return Err(CoreError::WrongKind { found: env.kind, expected: kind.to_string() });
    }
    let header = serde_json::from_value(env.header)?;
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or(r, &mut len[1..], "record length")?,
        }
        let mut rec = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(r, &mut rec, "record")?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SessionsHeader {
    sessions: usize,
    entries: usize,
}

pub fn write_sessions(path: &Path, sessions: &[RawSession]) -> Result<()> {
    let header = SessionsHeader {
        sessions: sessions.len(),
        entries: sessions.iter().map(|s| s.len()).sum(),
    };
    let records = sessions
        .iter()
        .map(|s| serde_json::to_vec(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut w = create(path)?;
    write_container(&mut w, "sessions", &header, records)?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_sessions(path: &Path) -> Result<Vec<RawSession>> {
    let (_, records): (SessionsHeader, _) = read_container(&mut open(path)?, "sessions")?;
    records
        .iter()
        .map(|r| serde_json::from_slice(r).map_err(CoreError::from))
        .collect()
}

/// Reads a JSONL file of `T`, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = open(path)?;
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
