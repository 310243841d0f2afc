//! Translation, embedding and metadata providers.
//!
//! Every provider has three backends selected by configuration: a live HTTP
//! client, a fixture file and a deterministic stub.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CoreError, Result};
use crate::io::read_jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    LiveHttp,
    FixtureFile,
    #[default]
    DeterministicStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Fixture file, relative to the providers file.
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Embedding dimension (embedders only).
    pub dim: usize,
    /// Fixture embedder: answer unknown texts with the stub instead of failing.
    pub stub_fallback: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::DeterministicStub,
            path: None,
            endpoint: None,
            api_key_env: None,
            timeout_ms: 10_000,
            retries: 3,
            dim: 64,
            stub_fallback: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub translate: ProviderConfig,
    pub embed: ProviderConfig,
    /// Embedder for documentation chunks and retrieval queries.
    pub docs_embed: ProviderConfig,
    pub meta: ProviderConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ProvidersConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: ProvidersConfig = toml::from_str(text).map_err(|e| CoreError::Config(format!("providers: {e}")))?;
        c.base_dir = base_dir.to_path_buf();
        for (section, p) in [
            ("TRANSLATE", &mut c.translate),
            ("EMBED", &mut c.embed),
            ("DOCS_EMBED", &mut c.docs_embed),
            ("META", &mut c.meta),
        ] {
            if let Ok(url) = std::env::var(format!("BIMFLOW_{section}_ENDPOINT")) {
                p.endpoint = Some(url);
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("providers serialize")
    }

    fn resolve(&self, p: &ProviderConfig, what: &str) -> Result<PathBuf> {
        let rel = p
            .path
            .as_ref()
            .ok_or_else(|| CoreError::Config(format!("{what} fixture provider needs `path`")))?;
        Ok(self.base_dir.join(rel))
    }

    pub fn translator(&self) -> Result<Box<dyn Translator>> {
        Ok(match self.translate.kind {
            ProviderKind::DeterministicStub => Box::new(StubTranslator),
            ProviderKind::FixtureFile => Box::new(FixtureTranslator::load(&self.resolve(&self.translate, "translate")?)?),
            ProviderKind::LiveHttp => Box::new(HttpTranslator::new(&self.translate)?),
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        self.make_embedder(&self.embed, "embed")
    }

    pub fn docs_embedder(&self) -> Result<Box<dyn Embedder>> {
        self.make_embedder(&self.docs_embed, "docs_embed")
    }

    fn make_embedder(&self, p: &ProviderConfig, what: &str) -> Result<Box<dyn Embedder>> {
        Ok(match p.kind {
            ProviderKind::DeterministicStub => Box::new(StubEmbedder::new(p.dim)),
            ProviderKind::FixtureFile => {
                let mut f = FixtureEmbedder::load(&self.resolve(p, what)?, p.dim)?;
                f.stub_fallback = p.stub_fallback;
                Box::new(f)
            }
            ProviderKind::LiveHttp => Box::new(HttpEmbedder::new(p)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub text: String,
    /// False when the raw name passed through untranslated.
    pub translated: bool,
}

pub trait Translator: Send + Sync {
    fn translate(&self, name: &str, source_lang: &str) -> Result<Translation>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn is_english(lang: &str) -> bool {
    let l = lang.trim().to_ascii_lowercase();
    l == "en" || l.starts_with("en-") || l.starts_with("en_")
}

pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Passes names through unchanged.
pub struct StubTranslator;

impl Translator for StubTranslator {
    fn translate(&self, name: &str, source_lang: &str) -> Result<Translation> {
        Ok(Translation { text: name.to_string(), translated: is_english(source_lang) })
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct TranslationRow {
    pub lang: String,
    pub name: String,
    pub english: String,
}

pub struct FixtureTranslator {
    by_lang: HashMap<(String, String), String>,
    by_name: HashMap<String, String>,
}

impl FixtureTranslator {
    pub fn from_rows(rows: Vec<TranslationRow>) -> Self {
        let mut by_lang = HashMap::new();
        let mut by_name = HashMap::new();
        for r in rows {
            by_name.entry(r.name.clone()).or_insert_with(|| r.english.clone());
            by_lang.insert((r.lang, r.name), r.english);
        }
        FixtureTranslator { by_lang, by_name }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rows(read_jsonl(path)?))
    }
}

impl Translator for FixtureTranslator {
    fn translate(&self, name: &str, source_lang: &str) -> Result<Translation> {
        if is_english(source_lang) {
            return Ok(Translation { text: name.to_string(), translated: true });
        }
        let hit = self
            .by_lang
            .get(&(source_lang.to_string(), name.to_string()))
            .or_else(|| self.by_name.get(name));
        Ok(match hit {
            Some(t) => Translation { text: t.clone(), translated: true },
            None => Translation { text: name.to_string(), translated: false },
        })
    }
}

/// Bag-of-words feature hashing: each lowercase word adds ±1 to a
/// SHA-256-chosen bucket; the result is unit-normalized.
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        StubEmbedder { dim: dim.max(2) }
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = Sha256::digest(w.to_lowercase().as_bytes());
            let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
            any = true;
        }
        if !any || v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        Ok(normalize(v))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct EmbeddingRow {
    pub index: usize,
    pub text: String,
    pub vector: Vec<f64>,
}

/// Looks texts up exactly, then case-insensitively.
pub struct FixtureEmbedder {
    dim: usize,
    exact: HashMap<String, Vec<f64>>,
    folded: HashMap<String, Vec<f64>>,
    pub stub_fallback: bool,
    stub: StubEmbedder,
}

impl FixtureEmbedder {
    pub fn from_rows(rows: Vec<EmbeddingRow>, dim: usize) -> Result<Self> {
        let mut exact = HashMap::new();
        let mut folded = HashMap::new();
        for r in rows {
            if r.vector.len() != dim {
                return Err(CoreError::DimensionMismatch { got: r.vector.len(), expected: dim });
            }
            let v = normalize(r.vector);
            folded.entry(r.text.to_lowercase()).or_insert_with(|| v.clone());
            exact.insert(r.text, v);
        }
        Ok(FixtureEmbedder { dim, exact, folded, stub_fallback: false, stub: StubEmbedder::new(dim) })
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        Self::from_rows(read_jsonl(path)?, dim)
    }
}

impl Embedder for FixtureEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.exact.get(text).or_else(|| self.folded.get(&text.to_lowercase())) {
            return Ok(v.clone());
        }
        if self.stub_fallback {
            return self.stub.embed(text);
        }
        Err(CoreError::Provider(format!("no fixture embedding for `{text}`")))
    }
}

struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    retries: u32,
}

impl HttpClient {
    fn new(p: &ProviderConfig) -> Result<Self> {
        let endpoint = p
            .endpoint
            .clone()
            .ok_or_else(|| CoreError::Config("live-http provider needs `endpoint`".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(p.timeout_ms)))
            .build()
            .into();
        let api_key = p.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        Ok(HttpClient { agent, endpoint, api_key, retries: p.retries })
    }

    fn post(&self, body: &serde_json::Value) -> Result<serde_json::Value> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            let mut req = self.agent.post(&self.endpoint);
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<serde_json::Value>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(endpoint = %self.endpoint, attempt, error = %last, "provider request failed");
        }
        Err(CoreError::Provider(format!("{} after {} attempts: {last}", self.endpoint, self.retries + 1)))
    }
}

/// Expects `{"translation": str}` in response to `{"q", "source", "target"}`.
pub struct HttpTranslator(HttpClient);

impl HttpTranslator {
    pub fn new(p: &ProviderConfig) -> Result<Self> {
        Ok(HttpTranslator(HttpClient::new(p)?))
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, name: &str, source_lang: &str) -> Result<Translation> {
        if is_english(source_lang) {
            return Ok(Translation { text: name.to_string(), translated: true });
        }
        let body = serde_json::json!({"q": name, "source": source_lang, "target": "en"});
        match self.0.post(&body) {
            Ok(v) => match v.get("translation").and_then(|t| t.as_str()) {
                Some(t) => Ok(Translation { text: t.to_string(), translated: true }),
                None => Ok(Translation { text: name.to_string(), translated: false }),
            },
            Err(e) => {
                tracing::warn!(%name, error = %e, "translation unavailable, passing through");
                Ok(Translation { text: name.to_string(), translated: false })
            }
        }
    }
}

/// Expects `{"embedding": [f64]}` in response to `{"input": str}`.
pub struct HttpEmbedder {
    client: HttpClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(p: &ProviderConfig) -> Result<Self> {
        Ok(HttpEmbedder { client: HttpClient::new(p)?, dim: p.dim })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let v = self.client.post(&serde_json::json!({ "input": text }))?;
        let vec: Vec<f64> = v
            .get("embedding")
            .and_then(|e| serde_json::from_value(e.clone()).ok())
            .ok_or_else(|| CoreError::Provider("response lacks `embedding`".into()))?;
        if vec.len() != self.dim {
            return Err(CoreError::DimensionMismatch { got: vec.len(), expected: self.dim });
        }
        Ok(normalize(vec))
    }
}

pub(crate) fn http_json(p: &ProviderConfig, body: &serde_json::Value) -> Result<serde_json::Value> {
    HttpClient::new(p)?.post(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_embeddings_are_unit_and_deterministic() {
        let e = StubEmbedder::new(32);
        let a = e.embed("Create Roof").unwrap();
        assert_eq!(a, e.embed("Create Roof").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed("").unwrap()[0], 1.0);
    }

    #[test]
    fn english_passes_through() {
        let t = FixtureTranslator::from_rows(vec![]);
        assert_eq!(t.translate("Create Object", "en").unwrap().text, "Create Object");
        let miss = t.translate("Objekt", "de").unwrap();
        assert!(!miss.translated);
    }

    #[test]
    fn fixture_dimension_is_checked() {
        let rows = vec![EmbeddingRow { index: 0, text: "a".into(), vector: vec![1.0, 0.0] }];
        assert!(matches!(
            FixtureEmbedder::from_rows(rows, 3),
            Err(CoreError::DimensionMismatch { got: 2, expected: 3 })
        ));
    }
}
