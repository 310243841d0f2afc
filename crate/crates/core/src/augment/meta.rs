//! Command metadata generation backed by retrieved documentation.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::docs::{retrieve_context, DocChunk};
use crate::align::providers::{http_json, Embedder, ProviderConfig, ProviderKind, ProvidersConfig};
use crate::error::{CoreError, Result};
use crate::io::read_jsonl;

pub const UNKNOWN: &str = "Unknown";

/// Registry row, also the JSONL schema of the persisted registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandMeta {
    pub name: String,
    pub description: String,
    #[serde(rename = "type")]
    pub type_label: String,
    #[serde(rename = "target")]
    pub target_label: String,
    #[serde(default)]
    pub is_workflow: bool,
    #[serde(default)]
    pub constituents: Vec<String>,
    /// Set when the provider failed and defaults were substituted.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl CommandMeta {
    pub fn unknown(name: &str) -> Self {
        CommandMeta {
            name: name.to_string(),
            description: String::new(),
            type_label: UNKNOWN.into(),
            target_label: UNKNOWN.into(),
            is_workflow: false,
            constituents: Vec::new(),
            flagged: true,
        }
    }
}

/// Closed label set; id 0 is always `Unknown`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelRegistry {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for LabelRegistry {
    fn from(labels: Vec<String>) -> Self {
        Self::from_labels(labels)
    }
}

impl From<LabelRegistry> for Vec<String> {
    fn from(r: LabelRegistry) -> Self {
        r.labels
    }
}

impl Default for LabelRegistry {
    fn default() -> Self {
        Self::from_labels(Vec::new())
    }
}

impl LabelRegistry {
    pub fn from_labels(labels: Vec<String>) -> Self {
        let mut r = LabelRegistry { labels: Vec::new(), index: HashMap::new() };
        r.intern(UNKNOWN);
        for l in labels {
            r.intern(&l);
        }
        r
    }

    /// Validates a label (trimmed, non-empty) and appends it when new.
    pub fn intern(&mut self, label: &str) -> u32 {
        let label = label.trim();
        let label = if label.is_empty() { UNKNOWN } else { label };
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn id(&self, label: &str) -> u32 {
        self.index.get(label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub description: String,
    #[serde(rename = "type")]
    pub type_label: String,
    #[serde(rename = "target")]
    pub target_label: String,
}

pub trait MetaProvider: Send + Sync {
    /// `context` holds retrieved documentation for a command, or the
    /// constituent descriptions for a workflow.
    fn describe(&self, name: &str, context: &[String]) -> Result<MetaResponse>;
}

#[derive(Debug, Clone, Deserialize)]
struct MetaRow {
    name: String,
    #[serde(flatten)]
    response: MetaResponse,
}

/// Canned responses keyed by command name.
pub struct FixtureMeta {
    rows: HashMap<String, MetaResponse>,
}

impl FixtureMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<MetaRow> = read_jsonl(path)?;
        Ok(FixtureMeta { rows: rows.into_iter().map(|r| (r.name, r.response)).collect() })
    }
}

impl MetaProvider for FixtureMeta {
    fn describe(&self, name: &str, _context: &[String]) -> Result<MetaResponse> {
        self.rows
            .get(name)
            .cloned()
            .ok_or_else(|| CoreError::Provider(format!("no fixture meta for `{name}`")))
    }
}

/// Offline heuristic: the type is the leading verb-like word, the target the
/// trailing noun, the description the first sentence of the best context.
pub struct StubMeta;

impl MetaProvider for StubMeta {
    fn describe(&self, name: &str, context: &[String]) -> Result<MetaResponse> {
        let words: Vec<&str> = name
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty() && !w.eq_ignore_ascii_case("tool"))
            .collect();
        let type_label = words.first().copied().unwrap_or(UNKNOWN).to_string();
        let target_label = if words.len() >= 2 { words[words.len() - 1] } else { "Object" }.to_string();
        let description = context
            .iter()
            .map(|c| {
                c.lines()
                    .filter(|l| !l.trim_start().starts_with('#'))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .find(|c| !c.trim().is_empty())
            .map(|c| {
                let c = c.trim();
                c.split_inclusive(". ").next().unwrap_or(c).trim().to_string()
            })
            .unwrap_or_default();
        Ok(MetaResponse { description, type_label, target_label })
    }
}

/// Posts `{"name", "context": [str]}`, expects `{"description", "type", "target"}`.
pub struct HttpMeta(ProviderConfig);

impl MetaProvider for HttpMeta {
    fn describe(&self, name: &str, context: &[String]) -> Result<MetaResponse> {
        let v = http_json(&self.0, &serde_json::json!({ "name": name, "context": context }))?;
        Ok(serde_json::from_value(v)?)
    }
}

impl ProvidersConfig {
    pub fn meta_provider(&self) -> Result<Box<dyn MetaProvider>> {
        Ok(match self.meta.kind {
            ProviderKind::DeterministicStub => Box::new(StubMeta),
            ProviderKind::FixtureFile => {
                let rel = self
                    .meta
                    .path
                    .as_ref()
                    .ok_or_else(|| CoreError::Config("meta fixture provider needs `path`".into()))?;
                Box::new(FixtureMeta::load(&self.base_dir.join(rel))?)
            }
            ProviderKind::LiveHttp => Box::new(HttpMeta(self.meta.clone())),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registries {
    pub types: LabelRegistry,
    pub targets: LabelRegistry,
}

fn finish(name: &str, r: Result<MetaResponse>, registries: &mut Registries) -> CommandMeta {
    match r {
        Ok(r) => {
            let t = registries.types.intern(&r.type_label);
            let g = registries.targets.intern(&r.target_label);
            CommandMeta {
                name: name.to_string(),
                description: r.description.trim().to_string(),
                type_label: registries.types.labels()[t as usize].clone(),
                target_label: registries.targets.labels()[g as usize].clone(),
                is_workflow: false,
                constituents: Vec::new(),
                flagged: false,
            }
        }
        Err(e) => {
            tracing::warn!(%name, error = %e, "meta provider failed, using Unknown labels");
            CommandMeta::unknown(name)
        }
    }
}

/// Retrieves `k` documentation chunks for `name` and asks the provider for
/// its description and labels.
pub fn augment_command(
    name: &str,
    chunks: &[DocChunk],
    k: usize,
    embedder: &dyn Embedder,
    provider: &dyn MetaProvider,
    registries: &mut Registries,
) -> CommandMeta {
    let r = retrieve_context(name, chunks, k, embedder)
        .and_then(|ctx| provider.describe(name, &ctx.iter().map(|c| c.text.clone()).collect::<Vec<_>>()));
    finish(name, r, registries)
}

/// Workflow meta from its constituents' metas, in order.
pub fn augment_workflow(name: &str, constituents: &[CommandMeta], provider: &dyn MetaProvider, registries: &mut Registries) -> CommandMeta {
    let context: Vec<String> = constituents
        .iter()
        .map(|m| format!("{}: {}", m.name, m.description))
        .collect();
    let mut meta = finish(name, provider.describe(name, &context), registries);
    meta.is_workflow = true;
    meta.constituents = constituents.iter().map(|m| m.name.clone()).collect();
    meta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_starts_with_unknown() {
        let mut r = LabelRegistry::default();
        assert_eq!(r.id(UNKNOWN), 0);
        assert_eq!(r.intern("Send"), 1);
        assert_eq!(r.intern(" Send "), 1);
        assert_eq!(r.intern(""), 0);
    }

    #[test]
    fn failing_provider_yields_flagged_unknown() {
        struct Down;
        impl MetaProvider for Down {
            fn describe(&self, _: &str, _: &[String]) -> Result<MetaResponse> {
                Err(CoreError::Provider("down".into()))
            }
        }
        let mut reg = Registries::default();
        let m = augment_workflow("A; B", &[CommandMeta::unknown("A"), CommandMeta::unknown("B")], &Down, &mut reg);
        assert!(m.flagged && m.is_workflow);
        assert_eq!((m.type_label.as_str(), m.target_label.as_str()), (UNKNOWN, UNKNOWN));
        assert!(m.description.is_empty());
    }
}
