//! Corpus-level glue between the stages, as the CLI runs them.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::align::providers::Embedder;
use crate::augment::bpe::BpeModel;
use crate::augment::dataset::{finalize_dataset, Dataset, DatasetConfig, ItemInfo};
use crate::augment::docs::DocChunk;
use crate::augment::features::{compute_features, Step};
use crate::augment::meta::{augment_command, augment_workflow, CommandMeta, MetaProvider, Registries};
use crate::error::Result;
use crate::io::{read_jsonl, write_jsonl};
use crate::types::{Level, RawSession};

/// Level and observed source ids of every canonical name.
pub fn item_info(sessions: &[RawSession]) -> ItemInfo {
    let mut info: ItemInfo = HashMap::new();
    for e in sessions.iter().flat_map(|s| &s.entries) {
        let slot = info.entry(e.message.clone()).or_insert((Level::Low, BTreeSet::new()));
        if e.prefix.is_high_level() {
            slot.0 = Level::High;
        }
        slot.1.insert(e.command_id);
    }
    info
}

pub fn corpus_steps(sessions: &[RawSession]) -> Vec<Vec<Step>> {
    sessions.iter().map(compute_features).collect()
}

pub fn token_corpus(steps: &[Vec<Step>]) -> Vec<Vec<String>> {
    steps.iter().map(|s| s.iter().map(|st| st.name.clone()).collect()).collect()
}

/// Metas for every command in the corpus, then for every workflow from its
/// constituents' metas.
pub fn augment_corpus(
    steps: &[Vec<Step>],
    bpe: &BpeModel,
    chunks: &[DocChunk],
    k: usize,
    embedder: &dyn Embedder,
    provider: &dyn MetaProvider,
) -> (Vec<CommandMeta>, Registries) {
    let names: BTreeSet<&str> = steps.iter().flatten().map(|s| s.name.as_str()).collect();
    let mut registries = Registries::default();
    let mut by_name = HashMap::new();
    let mut out = Vec::new();
    for name in names {
        let m = augment_command(name, chunks, k, embedder, provider, &mut registries);
        by_name.insert(name.to_string(), m.clone());
        out.push(m);
    }
    for (name, parts) in bpe.workflows() {
        let metas: Vec<CommandMeta> =
            parts.iter().map(|p| by_name.get(p).cloned().unwrap_or_else(|| CommandMeta::unknown(p))).collect();
        let m = augment_workflow(&name, &metas, provider, &mut registries);
        by_name.insert(name, m.clone());
        out.push(m);
    }
    (out, registries)
}

pub fn write_meta_registry(path: &Path, metas: &[CommandMeta]) -> Result<()> {
    write_jsonl(path, metas)
}

/// Reads the registry and rebuilds the label registries from it.
pub fn read_meta_registry(path: &Path) -> Result<(Vec<CommandMeta>, Registries)> {
    let metas: Vec<CommandMeta> = read_jsonl(path)?;
    let mut reg = Registries::default();
    for m in &metas {
        reg.types.intern(&m.type_label);
        reg.targets.intern(&m.target_label);
    }
    Ok((metas, reg))
}

/// Workflow-encoded steps of the unified corpus, finalized into a dataset.
pub fn build_dataset(
    sessions: &[RawSession],
    bpe: &BpeModel,
    metas: &[CommandMeta],
    registries: &Registries,
    embedder: &dyn Embedder,
    config: &DatasetConfig,
) -> Result<Dataset> {
    let info = item_info(sessions);
    let steps: Vec<Vec<Step>> = corpus_steps(sessions).iter().map(|s| bpe.encode_steps(s)).collect();
    let workflows: HashMap<String, Vec<String>> = bpe.workflows().into_iter().collect();
    let metas: HashMap<String, CommandMeta> = metas.iter().map(|m| (m.name.clone(), m.clone())).collect();
    finalize_dataset(steps, &info, &workflows, &metas, registries, embedder, config)
}
