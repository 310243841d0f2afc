use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bimflow_core::align::providers::ProvidersConfig;
use bimflow_core::align::{apply_alignment, build_alignment_dictionary, AlignmentConfig, AlignmentDictionary};
use bimflow_core::augment::bpe::{learn_workflows, BpeModel};
use bimflow_core::augment::dataset::{read_dataset, write_dataset, DatasetConfig, Split};
use bimflow_core::augment::docs::ingest_documentation;
use bimflow_core::flow::{track_corpus, FilterRules};
use bimflow_core::io::{group_into_sessions, open, parse_log_stream, read_sessions, write_sessions, LogFormat};
use bimflow_core::live::Engine;
use bimflow_core::model::checkpoint::Checkpoint;
use bimflow_core::model::infer::evaluate;
use bimflow_core::model::metrics::EvaluationReport;
use bimflow_core::model::train::{train, TrainConfig};
use bimflow_core::model::{BackboneKind, ModelConfig};
use bimflow_core::pipeline::Bundle;
use bimflow_core::redundancy::{apply_mapping, mine_mapping, ArmConfig, AssociationStats, CommandMapping};
use bimflow_core::stages::{augment_corpus, build_dataset, corpus_steps, read_meta_registry, token_corpus, write_meta_registry};
use bimflow_core::synthetic::{grammar_dataset, GrammarConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::server::{router, AppState};

#[derive(Parser)]
#[command(name = "bimflow", version, about = "BIM command-log pipeline and next-command recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Parse raw logs into sessions.
    Ingest(IngestArgs),
    /// Drop irrelevant entries and resolve undo/redo.
    Track(TrackArgs),
    /// Map multilingual names to canonical English names.
    Align(AlignArgs),
    /// Mine trigger rules and keep one entry per user action.
    Dedupe(DedupeArgs),
    /// Learn workflows by merging frequent command pairs.
    Bpe(BpeArgs),
    /// Describe and label every command and workflow from documentation.
    Augment(AugmentArgs),
    /// Build the training dataset.
    Dataset(DatasetArgs),
    /// Collect the preprocessing artifacts the service replays online.
    Bundle(BundleArgs),
    /// Train a recommender and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Serve live sessions and recommendations over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long, default_value = "jsonl")]
    pub format: LogFormat,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrackArgs {
    /// Filter rules (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct AlignArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Where the alignment dictionary is written.
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub providers: Option<PathBuf>,
    /// Reuse an existing dictionary instead of building one.
    #[arg(long)]
    pub reuse_dict: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct DedupeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Where the mined mapping is written.
    #[arg(long)]
    pub mapping: PathBuf,
    /// Confidence threshold.
    #[arg(long, default_value_t = 0.4)]
    pub phi: f64,
    /// Low-level entries kept per high-level entry.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BpeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub merges: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub workflows: PathBuf,
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub providers: Option<PathBuf>,
    /// Token budget per documentation chunk.
    #[arg(long, default_value_t = 512)]
    pub budget: usize,
    /// Documentation chunks retrieved per command.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DatasetArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub workflows: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub providers: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub min_session: usize,
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    #[arg(long, default_value_t = 110)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.85)]
    pub split: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BundleArgs {
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub mapping: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long)]
    pub workflows: PathBuf,
    /// Dataset whose vocabulary the served checkpoint was trained on.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file; omit together with `--synthetic` to train on the built-in grammar.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    pub synthetic: bool,
    #[arg(long, default_value = "decoder_only")]
    pub backbone: BackboneKind,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Embed command ids only, without feature fusion.
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log as JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to evaluate; the built-in grammar when `--synthetic`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    pub synthetic: bool,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Translator used for names missing from the dictionary.
    #[arg(long)]
    pub providers: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Idle minutes before a session is dropped.
    #[arg(long, default_value_t = 30)]
    pub ttl_minutes: i64,
}

fn providers(path: Option<&Path>) -> Result<ProvidersConfig> {
    Ok(match path {
        Some(p) => ProvidersConfig::load(p)?,
        None => ProvidersConfig::default(),
    })
}

fn rules(path: Option<&Path>) -> Result<FilterRules> {
    Ok(match path {
        Some(p) => FilterRules::load(p)?,
        None => FilterRules::default(),
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn read_workflows(path: &Path) -> Result<BpeModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn summary<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let (entries, report) = parse_log_stream(open(&a.input)?, a.format)?;
    let sessions = group_into_sessions(entries);
    write_sessions(&a.out, &sessions)?;
    summary(&serde_json::json!({ "sessions": sessions.len(), "report": report }));
    Ok(())
}

pub fn track(a: &TrackArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let (tracked, report) = track_corpus(&sessions, &rules(a.rules.as_deref())?);
    write_sessions(&a.out, &tracked)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    summary(&report);
    Ok(())
}

pub fn align(a: &AlignArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let p = providers(a.providers.as_deref())?;
    let translator = p.translator()?;
    let mut dict = if a.reuse_dict {
        AlignmentDictionary::load(&a.dict)?
    } else {
        let (dict, report) = build_alignment_dictionary(&sessions, &AlignmentConfig::default(), translator.as_ref(), p.embedder()?.as_ref())?;
        if let Some(r) = &a.report {
            write_json(r, &report)?;
        }
        dict
    };
    let aligned = apply_alignment(&sessions, &mut dict, translator.as_ref())?;
    dict.save(&a.dict)?;
    write_sessions(&a.out, &aligned)?;
    summary(&serde_json::json!({ "pairs": dict.len(), "sessions": aligned.len() }));
    Ok(())
}

pub fn dedupe(a: &DedupeArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let config = ArmConfig { window: a.window, threshold: a.phi, top_n: a.top };
    let stats = AssociationStats::count(&sessions, config.window);
    let mapping = mine_mapping(&stats, &config, None)?;
    let (unified, report) = apply_mapping(&sessions, &mapping, config.window);
    mapping.save(&a.mapping)?;
    write_sessions(&a.out, &unified)?;
    summary(&report);
    Ok(())
}

pub fn bpe(a: &BpeArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let model = learn_workflows(&token_corpus(&corpus_steps(&sessions)), a.merges);
    write_json(&a.out, &model)?;
    summary(&serde_json::json!({ "merges": model.merges.len(), "workflows": model.workflows() }));
    Ok(())
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let bpe = read_workflows(&a.workflows)?;
    let p = providers(a.providers.as_deref())?;
    let embedder = p.docs_embedder()?;
    let (chunks, stats) = ingest_documentation(&a.docs, a.budget, embedder.as_ref())?;
    let (metas, registries) = augment_corpus(&corpus_steps(&sessions), &bpe, &chunks, a.k, embedder.as_ref(), p.meta_provider()?.as_ref());
    write_meta_registry(&a.out, &metas)?;
    summary(&serde_json::json!({
        "chunks": stats,
        "commands": metas.len(),
        "flagged": metas.iter().filter(|m| m.flagged).count(),
        "types": registries.types.len(),
        "targets": registries.targets.len(),
    }));
    Ok(())
}

pub fn dataset(a: &DatasetArgs) -> Result<()> {
    let sessions = read_sessions(&a.input)?;
    let bpe = read_workflows(&a.workflows)?;
    let (metas, registries) = read_meta_registry(&a.meta)?;
    let p = providers(a.providers.as_deref())?;
    let config = DatasetConfig {
        min_session: a.min_session,
        min_count: a.min_count,
        max_len: a.max_len,
        split: a.split,
        seed: a.seed,
        ..Default::default()
    };
    let ds = build_dataset(&sessions, &bpe, &metas, &registries, p.embedder()?.as_ref(), &config)?;
    write_dataset(&ds, &a.out)?;
    summary(&serde_json::json!({ "vocabulary": ds.vocabulary.len(), "report": ds.report }));
    Ok(())
}

pub fn bundle(a: &BundleArgs) -> Result<()> {
    let b = Bundle {
        rules: rules(a.rules.as_deref())?,
        dictionary: AlignmentDictionary::load(&a.dict)?,
        mapping: CommandMapping::load(&a.mapping)?,
        window: a.window,
        bpe: read_workflows(&a.workflows)?,
        vocabulary: read_dataset(&a.dataset)?.vocabulary,
    };
    b.save(&a.out)?;
    summary(&serde_json::json!({ "vocabulary_hash": b.vocabulary.hash() }));
    Ok(())
}

fn load_dataset(path: Option<&Path>, synthetic: bool) -> Result<bimflow_core::augment::dataset::Dataset> {
    match (path, synthetic) {
        (Some(p), _) => Ok(read_dataset(p)?),
        (None, true) => Ok(grammar_dataset(&GrammarConfig::default())?),
        (None, false) => bail!("pass --dataset <file> or --synthetic"),
    }
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(a.dataset.as_deref(), a.synthetic)?;
    let config = ModelConfig {
        backbone: a.backbone,
        layers: a.layers,
        dim: a.dim,
        heads: a.heads,
        fusion: !a.no_fusion,
        ..Default::default()
    };
    let tc = TrainConfig { epochs: a.epochs, batch: a.batch, lr: a.lr, patience: a.patience, seed: a.seed, ..Default::default() };
    let outcome = train(&ds, config, &tc)?;
    if let Some(p) = &a.log {
        write_json(p, &outcome.log)?;
    }
    let ckpt = Checkpoint {
        model: outcome.model,
        vocabulary: ds.vocabulary.clone(),
        catalog: ds.catalog.clone(),
        norm: ds.norm,
        metrics: Some(outcome.report.clone()),
    };
    ckpt.save(&a.out)?;
    summary(&serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "recall": outcome.report.recall,
        "ndcg": outcome.report.ndcg,
        "version": ckpt.version(),
    }));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(a.dataset.as_deref(), a.synthetic)?;
    if ds.vocabulary.hash() != ckpt.vocabulary.hash() {
        bail!("dataset vocabulary {} does not match checkpoint vocabulary {}", ds.vocabulary.hash(), ckpt.vocabulary.hash());
    }
    let seqs: Vec<_> = ds.split(Split::Validation).collect();
    let report = evaluate(&ckpt.model, &seqs, &ckpt.vocabulary, &ckpt.norm, &a.k, a.batch)?;
    let label = format!("{}{}", ckpt.model.config.backbone.as_str(), if ckpt.model.config.fusion { "" } else { " (ids only)" });
    let table = format!("{}\n{}\n", EvaluationReport::MARKDOWN_HEADER, report.markdown_row(&label));
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.markdown {
        fs::write(p, &table)?;
    }
    summary(&serde_json::json!({ "instances": report.instances, "recall": report.recall, "ndcg": report.ndcg }));
    print!("{table}");
    Ok(())
}

pub async fn serve(a: &ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let bundle = Bundle::load(&a.bundle)?;
    let translator = providers(a.providers.as_deref())?.translator()?;
    let engine = Engine::new(ckpt, bundle, translator)?;
    let state = AppState::new(engine);
    let ttl = chrono::Duration::minutes(a.ttl_minutes);
    let sweeper = Arc::clone(&state);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.expire(ttl);
            if n > 0 {
                tracing::info!(expired = n, "dropped idle sessions");
            }
        }
    });
    let addr = format!("{}:{}", a.host, a.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, version = %state.engine.version, "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
