//! One function per headline check. Each returns whether it held plus a
//! short measurement, so both the focused tests and the acceptance report
//! run exactly the same code.

use std::time::Instant;

use bimflow_core::align::providers::Embedder;
use bimflow_core::align::{apply_alignment, build_alignment_dictionary, AlignmentConfig};
use bimflow_core::augment::bpe::learn_workflows;
use bimflow_core::augment::dataset::{NormStats, Split};
use bimflow_core::flow::{filter_irrelevant, resolve_undo_redo, track_corpus, FilterRules};
use bimflow_core::live::{LiveSession, MAX_LIVE_STEPS};
use bimflow_core::model::batch::{apply_masking, build_input, Mode, StepInput};
use bimflow_core::model::metrics::{ndcg_at, rank_of, recall_at};
use bimflow_core::model::train::{train, TrainConfig};
use bimflow_core::model::{BackboneKind, Dims, ItemTable, LossConfig, ModelConfig, Recommender};
use bimflow_core::pipeline::process_session;
use bimflow_core::redundancy::{apply_mapping, mine_mapping, ArmConfig, AssociationStats};
use bimflow_core::synthetic::{grammar_dataset, GrammarConfig};
use bimflow_core::RawSession;
use bimflow_nn::gradcheck::check_params;
use bimflow_nn::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------

pub struct FixtureRun {
    pub sessions: Vec<RawSession>,
    pub filtered: Vec<RawSession>,
    pub tracked: Vec<RawSession>,
    pub aligned: Vec<RawSession>,
    pub stats: AssociationStats,
    pub finals: Vec<RawSession>,
}

pub fn run_log_compare() -> FixtureRun {
    let sessions = log_compare_sessions();
    let rules = FilterRules::default();
    let filtered: Vec<RawSession> = sessions.iter().map(|s| filter_irrelevant(s, &rules, None)).collect();
    let (tracked, _) = track_corpus(&sessions, &rules);
    let (mut dict, _) =
        build_alignment_dictionary(&tracked, &AlignmentConfig::default(), &translator(), &embedder()).unwrap();
    let aligned = apply_alignment(&tracked, &mut dict, &translator()).unwrap();
    let arm = ArmConfig::default();
    let stats = AssociationStats::count(&aligned, arm.window);
    let mapping = mine_mapping(&stats, &arm, None).unwrap();
    let (finals, _) = apply_mapping(&aligned, &mapping, arm.window);
    FixtureRun { sessions, filtered, tracked, aligned, stats, finals }
}

pub fn pipeline_fixture() -> Outcome {
    let t = Instant::now();
    let run = run_log_compare();
    let elapsed = t.elapsed();
    let entries: usize = run.sessions.iter().map(|s| s.len()).sum();
    let stages = [
        ("filtered", &run.filtered, "log_compare.filtered.txt"),
        ("tracked", &run.tracked, "log_compare.tracked.txt"),
        ("aligned", &run.aligned, "log_compare.aligned.txt"),
        ("final", &run.finals, "log_compare.final.txt"),
    ];
    let mismatched: Vec<&str> = stages
        .iter()
        .filter(|(_, got, file)| rows_of(got) != golden(file))
        .map(|(name, _, _)| *name)
        .collect();
    let actions = rows_of(&run.finals).len();
    let pass = entries == 16 && actions == 4 && mismatched.is_empty() && elapsed.as_secs_f64() < 1.0;
    Outcome::new(
        pass,
        format!("16 → {actions} actions, golden mismatches {mismatched:?}, {:.1} ms", elapsed.as_secs_f64() * 1e3),
    )
}

// ---------------------------------------------------------------------------

pub fn undo_oracle(cases: usize) -> Outcome {
    let mut r = rng(11);
    let mut agree = 0;
    for _ in 0..cases {
        let len = r.random_range(0..40);
        let case = random_undo_session(&mut r, len);
        let (out, _) = resolve_undo_redo(&case.session);
        let expected: Vec<LogEntry> = case.alive.iter().map(|&i| case.session.entries[i].clone()).collect();
        agree += (out.entries == expected) as usize;
    }
    Outcome::new(agree == cases, format!("{agree}/{cases} sessions agree"))
}

// ---------------------------------------------------------------------------

pub struct TableRow {
    pub lang: String,
    pub name: String,
    pub id: i64,
    pub aligned: String,
}

pub fn alignment_table_rows() -> Vec<TableRow> {
    let raw: Vec<serde_json::Value> = read_jsonl(&fixture("alignment_table.jsonl")).unwrap();
    raw.into_iter()
        .map(|v| TableRow {
            lang: v["lang"].as_str().unwrap().into(),
            name: v["name"].as_str().unwrap().into(),
            id: v["id"].as_i64().unwrap(),
            aligned: v["aligned"].as_str().unwrap().into(),
        })
        .collect()
}

pub fn alignment_table() -> Outcome {
    let rows = alignment_table_rows();
    let entries = rows
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mut e = entry("t1", t as i64, Prefix::Event, &r.name);
            e.command_id = r.id;
            e.language = r.lang.clone();
            e
        })
        .collect();
    let sessions = vec![RawSession::new("t1", entries)];
    let (dict, _) = build_alignment_dictionary(&sessions, &AlignmentConfig::default(), &translator(), &embedder()).unwrap();
    let correct = rows.iter().filter(|r| dict.canonical(&r.name, r.id) == Some(r.aligned.as_str())).count();
    let canon: BTreeSet<String> = bimflow_core::align::canonical_names(&dict);
    let vector17 = embedding_rows()[17].vector.clone();
    let n = vector17.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lookup = embedder().embed("create roof").unwrap();
    let fixture_ok = lookup.iter().zip(&vector17).all(|(a, b)| (a - b / n).abs() < 1e-12);
    let pass = correct == rows.len() && rows.len() == 21 && canon.len() == 3 && fixture_ok;
    Outcome::new(pass, format!("{correct}/{} rows, canonical names {canon:?}", rows.len()))
}

// ---------------------------------------------------------------------------

pub fn arm_oracle() -> Outcome {
    let mut r = rng(21);
    let mut checked = 0u64;
    let mut wrong = 0u64;
    let mut largest = 0;
    for round in 0..12 {
        let (sessions, max_len) = if round == 11 { (200, 80) } else { (r.random_range(1..40), r.random_range(1..60)) };
        let corpus = random_arm_corpus(&mut r, sessions, max_len);
        let window = if round % 3 == 0 { 3 } else { 10 };
        let brute = brute_stats(&corpus, window);
        largest = largest.max(brute.total);
        if brute.total == 0 {
            continue;
        }
        let stats = AssociationStats::count(&corpus, window);
        for (x, &nx) in &brute.items {
            checked += 1;
            wrong += (stats.support_ratio(x).unwrap() != (nx, brute.total)) as u64;
            for y in brute.items.keys() {
                let pair = brute.pairs.get(&(x.clone(), y.clone())).copied().unwrap_or(0);
                checked += 2;
                wrong += (stats.support_pair_ratio(x, y).unwrap() != (pair, brute.total)) as u64;
                wrong += (stats.confidence_ratio(x, y).unwrap() != (pair, nx)) as u64;
            }
        }
    }
    let pass = wrong == 0 && largest <= 10_000 && largest >= 5_000;
    Outcome::new(pass, format!("{checked} ratios compared, {wrong} differ, largest corpus {largest} entries"))
}

// ---------------------------------------------------------------------------

pub fn bpe_oracle() -> Outcome {
    let mut r = rng(31);
    let mut corpora_ok = 0;
    let rounds = 15;
    let mut largest = 0;
    for round in 0..rounds {
        let corpus = if round == rounds - 1 {
            random_token_corpus(&mut r, 6, 200, 90)
        } else {
            let (a, n, m) = (r.random_range(2..8), r.random_range(1..30), r.random_range(0..40));
            random_token_corpus(&mut r, a, n, m)
        };
        largest = largest.max(corpus.iter().map(Vec::len).sum::<usize>());
        let merges = r.random_range(0..25);
        let model = learn_workflows(&corpus, merges);
        corpora_ok += (model.merges == reference_merges(&corpus, merges)) as usize;
    }
    let train = random_token_corpus(&mut r, 6, 100, 30);
    let model = learn_workflows(&train, 30);
    let trips = 10_000;
    let mut round_trips = 0;
    for _ in 0..trips {
        let seq = random_token_corpus(&mut r, 7, 1, 25).pop().unwrap();
        round_trips += (model.decode(&model.encode(&seq)) == seq) as usize;
    }
    let pass = corpora_ok == rounds && round_trips == trips && largest <= 10_000;
    Outcome::new(
        pass,
        format!("merge sequences {corpora_ok}/{rounds} (largest {largest} tokens), round trips {round_trips}/{trips}"),
    )
}

// ---------------------------------------------------------------------------
// Gradient checks.

pub const GRAD_TOL: f64 = 1e-4;

pub fn tiny_config(backbone: BackboneKind, fusion: bool) -> ModelConfig {
    ModelConfig {
        backbone,
        layers: 2,
        dim: 8,
        heads: 2,
        kv_groups: if backbone.is_decoder() { 1 } else { 2 },
        ffn_hidden: 12,
        max_len: 12,
        fusion,
        fusion_heads: 2,
        mlm_ratio: 0.3,
        final_only: false,
        loss: LossConfig { cmd_alpha: Some((0..7).map(|i| 0.5 + 0.1 * i as f64).collect()), ..Default::default() },
    }
}

pub fn tiny_model(config: ModelConfig, seed: u64) -> Recommender<f64> {
    let mut r = rng(seed);
    let dims = Dims { vocab: 7, types: 3, targets: 4, desc_dim: 3 };
    let items = ItemTable {
        type_ids: (0..7).map(|i| i % 3).collect(),
        target_ids: (0..7).map(|i| (i * 2) % 4).collect(),
        desc: (0..21).map(|_| r.random_range(-1.0..1.0)).collect(),
    };
    Recommender::new(config, dims, items, &mut r).unwrap()
}

pub fn random_steps(r: &mut impl Rng, n: usize, vocab: u32) -> Vec<StepInput> {
    (0..n)
        .map(|t| StepInput {
            id: r.random_range(0..vocab),
            dt: if t == 0 { 0.0 } else { r.random_range(0.0..30.0) },
            occurrences: r.random_range(1..4) as f64,
        })
        .collect()
}

/// A training batch of two sequences of different lengths.
pub fn random_batch(model: &Recommender<f64>, r: &mut impl Rng) -> bimflow_core::model::batch::ModelInput {
    let cfg = &model.config;
    let (na, nb) = (r.random_range(3..7), r.random_range(2..5));
    let a = random_steps(r, na, 7);
    let b = random_steps(r, nb, 7);
    let pa = apply_masking(a.len(), cfg.masking(), Mode::Train, cfg.mlm_ratio, false, r).unwrap();
    let pb = apply_masking(b.len(), cfg.masking(), Mode::Train, cfg.mlm_ratio, false, r).unwrap();
    build_input(&[(&a, &pa), (&b, &pb)], &NormStats::default())
}

fn readout(g: &mut Graph<'_, f64>, x: NodeId, r: &mut impl Rng) -> bimflow_nn::Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = g.input(Tensor::randn(shape, 1.0, r));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug)]
pub enum Block {
    FusionAttention,
    Pooling,
    Backbone(BackboneKind),
    Focal,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::FusionAttention,
        Block::Pooling,
        Block::Backbone(BackboneKind::EncoderOnly),
        Block::Backbone(BackboneKind::DecoderOnly),
        Block::Backbone(BackboneKind::DecoderMoe),
        Block::Focal,
    ];

    pub fn label(self) -> String {
        match self {
            Block::FusionAttention => "fusion attention".into(),
            Block::Pooling => "pooled fusion weights".into(),
            Block::Backbone(b) => format!("{} + focal heads", b.as_str()),
            Block::Focal => "focal loss".into(),
        }
    }
}

/// Worst relative error over `instances` random instances of `block`.
pub fn grad_check(block: Block, instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let err = match block {
            Block::FusionAttention | Block::Pooling => {
                let model = tiny_model(tiny_config(BackboneKind::DecoderOnly, true), seed);
                let inp = random_batch(&model, &mut r);
                let w_seed = r.random::<u64>();
                check_params(
                    &model.store,
                    |g| {
                        let (x, alpha) = model.fuse(g, &inp).map_err(nn_err)?;
                        let target = match block {
                            Block::Pooling => alpha.expect("fusion enabled"),
                            _ => x,
                        };
                        readout(g, target, &mut rng(w_seed))
                    },
                    4,
                    &mut r,
                )
                .unwrap()
            }
            Block::Backbone(kind) => {
                let model = tiny_model(tiny_config(kind, true), seed);
                let inp = random_batch(&model, &mut r);
                check_params(&model.store, |g| model.loss(g, &inp).map_err(nn_err), 3, &mut r).unwrap()
            }
            Block::Focal => {
                let mut store = bimflow_nn::ParamStore::new();
                let rows = r.random_range(1..6);
                let classes = r.random_range(2..9);
                let l = store.add("logits", Tensor::randn(vec![rows, classes], 2.0, &mut r));
                let labels: Vec<Option<usize>> =
                    (0..rows).map(|i| (i == 0 || r.random_bool(0.8)).then(|| r.random_range(0..classes))).collect();
                let alpha: Vec<f64> = (0..classes).map(|_| r.random_range(0.2..2.0)).collect();
                let gamma = [0.0, 0.5, 1.0, 2.0, 3.5][seed as usize % 5];
                check_params(&store, |g| {
                        let x = g.param(l);
                        g.focal_loss(x, &labels, Some(&alpha), gamma)
                    }, 64, &mut r).unwrap()
            }
        };
        worst = worst.max(err.max_rel_err);
    }
    worst
}

fn nn_err(e: bimflow_core::CoreError) -> bimflow_nn::NnError {
    match e {
        bimflow_core::CoreError::Nn(e) => e,
        other => panic!("model error during gradient check: {other}"),
    }
}

pub fn gradient_checks(instances: u64) -> Outcome {
    let mut worst = Vec::new();
    for b in Block::ALL {
        worst.push((b.label(), grad_check(b, instances)));
    }
    let pass = instances >= 100 && worst.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = worst.iter().map(|(l, e)| format!("{l} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("{instances} instances each; worst rel err: {detail}"))
}

// ---------------------------------------------------------------------------

pub fn metric_oracle(instances: usize) -> Outcome {
    let mut r = rng(41);
    let mut wrong = 0;
    for i in 0..instances {
        let n = r.random_range(1..40);
        // Coarse grids force ties in a share of the instances.
        let scores: Vec<f64> = if i % 3 == 0 {
            (0..n).map(|_| r.random_range(0..4) as f64).collect()
        } else {
            (0..n).map(|_| r.random_range(-5.0..5.0)).collect()
        };
        let target = r.random_range(0..n);
        let rank = rank_of(&scores, target);
        wrong += (rank != brute_rank(&scores, target)) as usize;
        for k in [1, 3, 5, 10, 20] {
            wrong += (recall_at(rank, k) != brute_recall(&scores, target, k)) as usize;
            wrong += ((ndcg_at(rank, k) - brute_ndcg(&scores, target, k)).abs() > 1e-12) as usize;
        }
    }
    let rank2 = ndcg_at(2, 10);
    let rank2_ok = (rank2 - 1.0 / 3f64.log2()).abs() < 1e-9;
    Outcome::new(
        wrong == 0 && rank2_ok,
        format!("{instances} instances, {wrong} mismatches; NDCG at rank 2 = {rank2:.12}"),
    )
}

// ---------------------------------------------------------------------------

pub fn focal_reduction(batches: u64) -> Outcome {
    let mut worst_ce: f64 = 0.0;
    let mut worst_multi: f64 = 0.0;
    for seed in 0..batches {
        let mut r = rng(500 + seed);
        let rows = r.random_range(1..8);
        let classes = r.random_range(2..12);
        let logits: Vec<Vec<f64>> = (0..rows).map(|_| (0..classes).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
        let labels: Vec<Option<usize>> =
            (0..rows).map(|i| (i == 0 || r.random_bool(0.7)).then(|| r.random_range(0..classes))).collect();
        let store = bimflow_nn::ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(rows, classes, logits.iter().flatten().copied().collect()));
        let uniform = vec![1.0; classes];
        let f = g.focal_loss(x, &labels, Some(&uniform), 0.0).unwrap();
        worst_ce = worst_ce.max((g.value(f).item() - cross_entropy(&logits, &labels)).abs());

        // Auxiliary weights of zero leave exactly the command term.
        let mut cfg = tiny_config(BackboneKind::DecoderOnly, true);
        cfg.loss = LossConfig { gamma: 2.0, aux_type: 0.0, aux_target: 0.0, cmd_alpha: None };
        let model = tiny_model(cfg, seed);
        let inp = random_batch(&model, &mut r);
        let mut g = Graph::new(&model.store);
        let total = model.loss(&mut g, &inp).unwrap();
        let fwd = model.forward(&mut g, &inp).unwrap();
        let rows: Vec<usize> = inp.labels.iter().map(|l| l.0).collect();
        let heads = model.predict(&mut g, fwd.hidden, &rows).unwrap();
        let cmd: Vec<Option<usize>> = inp.labels.iter().map(|l| Some(l.1 as usize)).collect();
        let only = g.focal_loss(heads.cmd, &cmd, None, 2.0).unwrap();
        worst_multi = worst_multi.max((g.value(total).item() - g.value(only).item()).abs());
    }
    let pass = worst_ce < 1e-9 && worst_multi == 0.0;
    Outcome::new(
        pass,
        format!("{batches} batches; |focal(γ=0) − CE| ≤ {worst_ce:.1e}; |total(0,0) − command| = {worst_multi:.1e}"),
    )
}

// ---------------------------------------------------------------------------

/// Hidden rows of a single sequence, as raw bits.
fn hidden_bits(model: &Recommender<f64>, steps: &[StepInput]) -> Vec<Vec<u64>> {
    let plan = bimflow_core::model::batch::MaskPlan { input_len: steps.len(), masked: vec![], labels: vec![] };
    let inp = build_input(&[(steps, &plan)], &NormStats::default());
    let mut g = Graph::new(&model.store);
    let fwd = model.forward(&mut g, &inp).unwrap();
    let v = g.value(fwd.hidden);
    (0..steps.len()).map(|r| v.row(r).iter().map(|x| x.to_bits()).collect()).collect()
}

pub fn causal_contract(sequences: u64) -> Outcome {
    let mut prefixes = 0;
    let mut broken = 0;
    for kind in [BackboneKind::DecoderOnly, BackboneKind::DecoderMoe] {
        let model = tiny_model(tiny_config(kind, true), 77);
        let mut r = rng(61);
        for _ in 0..sequences {
            let n = r.random_range(2..=12);
            let steps = random_steps(&mut r, n, 7);
            let base = hidden_bits(&model, &steps);
            for t in 0..n - 1 {
                // Rewrite every event after position t.
                let mut other = steps.clone();
                for s in &mut other[t + 1..] {
                    *s = random_steps(&mut r, 2, 7)[1];
                }
                let got = hidden_bits(&model, &other);
                prefixes += 1;
                broken += (got[..=t] != base[..=t]) as usize;
            }
        }
    }
    Outcome::new(broken == 0 && prefixes > 0, format!("{prefixes} prefixes compared, {broken} differ"))
}

// ---------------------------------------------------------------------------

pub struct DeskResult {
    pub fusion: bimflow_core::model::metrics::EvaluationReport,
    pub baseline: bimflow_core::model::metrics::EvaluationReport,
    pub seconds: f64,
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig { epochs: 20, lr: 3e-3, batch: 32, patience: 3, ..Default::default() }
}

pub fn desk_run() -> DeskResult {
    let t = Instant::now();
    let ds = grammar_dataset(&GrammarConfig::default()).unwrap();
    assert!(ds.split(Split::Validation).count() > 0);
    let tc = desk_train_config();
    let fusion = train(&ds, ModelConfig { fusion: true, ..Default::default() }, &tc).unwrap().report;
    let baseline = train(&ds, ModelConfig { fusion: false, ..Default::default() }, &tc).unwrap().report;
    DeskResult { fusion, baseline, seconds: t.elapsed().as_secs_f64() }
}

pub fn desk_learning() -> Outcome {
    let d = desk_run();
    let r5 = d.fusion.recall[&5];
    let (f3, b3) = (d.fusion.recall[&3], d.baseline.recall[&3]);
    let pass = r5 >= 0.90 && f3 - b3 >= 0.01 && d.seconds < 900.0;
    Outcome::new(
        pass,
        format!(
            "fusion R@5 {r5:.4}, R@3 {f3:.4} vs id-only R@3 {b3:.4} (+{:.1} pts), {:.0} s",
            100.0 * (f3 - b3),
            d.seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// Live sessions against the batch pipeline.

pub mod live {
    use bimflow_core::align::{AlignmentDictionary, DictEntry, Provenance};
    use bimflow_core::augment::bpe::BpeModel;
    use bimflow_core::pipeline::Bundle;
    use bimflow_core::redundancy::{CommandMapping, MappingRow, ReviewStatus};
    use bimflow_core::types::{Level, VocabItem, Vocabulary};

    use super::*;

    fn row(high: &str, low: &str, confidence: f64) -> MappingRow {
        MappingRow { high: high.into(), low: low.into(), confidence, status: ReviewStatus::Auto }
    }

    pub fn bundle() -> Bundle {
        let dict = AlignmentDictionary::from_entries(
            [("Wand", 10, "Wall"), ("Tür", 11, "Door"), ("Wand erstellen", 20, "Create Wall"), ("Objekt anlegen", 92, "Create Object")]
                .into_iter()
                .map(|(name, id, canonical)| DictEntry {
                    name: name.into(),
                    id,
                    canonical: canonical.into(),
                    provenance: Provenance::DirectCentroid,
                })
                .collect(),
        );
        let mapping = CommandMapping::from_rows(vec![
            row("Tool: Wall", "Event: Create Wall", 0.9),
            row("Tool: Wall", "End Event: Create Object", 0.8),
            row("Tool: Door", "End Event: Create Object", 0.7),
        ]);
        let bpe = BpeModel {
            merges: vec![("Wall".into(), "Door".into()), ("Wall; Door".into(), "Save".into())],
            requested: 2,
        };
        let mut items: Vec<VocabItem> =
            ["Wall", "Door", "Save", "Slab", "Copy"].iter().map(|n| VocabItem::command(*n, Level::High)).collect();
        items.push(VocabItem {
            name: "Wall; Door".into(),
            level: Level::High,
            source_ids: Default::default(),
            constituents: vec!["Wall".into(), "Door".into()],
        });
        Bundle {
            rules: FilterRules::default(),
            dictionary: dict,
            mapping,
            window: 10,
            bpe,
            vocabulary: Vocabulary::from_items(items).unwrap(),
        }
    }

    /// Mixed-language events with undo/redo, aborts, noise and unseen names.
    pub fn random_stream(r: &mut impl Rng, len: usize) -> Vec<LogEntry> {
        let kinds: [(Prefix, &str, i64, &str); 16] = [
            (Prefix::Tool, "Wall", 10, "en"),
            (Prefix::Tool, "Wand", 10, "de"),
            (Prefix::Tool, "Door", 11, "en"),
            (Prefix::Tool, "Tür", 11, "de"),
            (Prefix::Menu, "Save", 30, "en"),
            (Prefix::Tool, "Slab", 12, "en"),
            (Prefix::Menu, "Copy", 31, "en"),
            (Prefix::Tool, "Dach", 13, "de"),
            (Prefix::Event, "Create Wall", 20, "en"),
            (Prefix::Event, "Wand erstellen", 20, "de"),
            (Prefix::EndEvent, "Create Object", 92, "en"),
            (Prefix::EndEvent, "Objekt anlegen", 92, "de"),
            (Prefix::Event, "Zoom", 50, "en"),
            (Prefix::BeginInternalEvent, "Update Layers", 51, "en"),
            (Prefix::UndoEvent, "", 0, "en"),
            (Prefix::RedoEvent, "", 0, "en"),
        ];
        let mut out: Vec<LogEntry> = Vec::with_capacity(len);
        let mut t = 0i64;
        for _ in 0..len {
            t += r.random_range(0..20_000);
            let roll = r.random_range(0..100);
            let e = if roll < 4 {
                // Abort the most recent event name seen, if any.
                let name = out
                    .iter()
                    .rev()
                    .find(|e| e.prefix == Prefix::Event)
                    .map_or("Create Wall".to_string(), |e| e.message.clone());
                let mut e = entry("live", t, Prefix::AbortEvent, &name);
                e.command_id = 20;
                e
            } else {
                let (p, m, id, lang) = kinds[r.random_range(0..kinds.len())];
                let msg = match p {
                    Prefix::UndoEvent | Prefix::RedoEvent => {
                        let prev = out.iter().rev().filter(|e| e.prefix.is_high_level()).nth(r.random_range(0..3));
                        match prev {
                            Some(e) if r.random_bool(0.7) => e.message.clone(),
                            _ if p == Prefix::UndoEvent => "Undo".into(),
                            _ => "Redo".into(),
                        }
                    }
                    _ => m.to_string(),
                };
                let mut e = entry("live", t, p, &msg);
                e.command_id = id;
                e.language = lang.into();
                e
            };
            out.push(e);
        }
        out
    }

    /// Feeds each stream event by event and compares with the batch
    /// pipeline after every append. Also replays the deltas into a mirror.
    pub fn equivalence(streams: usize) -> Outcome {
        let b = bundle();
        let tr = translator();
        let mut r = rng(71);
        let mut agree = 0;
        let mut checks = 0usize;
        let mut longest = 0;
        for s in 0..streams {
            let len = if s % 20 == 0 { r.random_range(200..400) } else { r.random_range(1..80) };
            let events = random_stream(&mut r, len);
            let mut live = LiveSession::new("live", Utc::now());
            let mut mirror: Vec<(usize, String)> = Vec::new();
            let mut ok = true;
            for (i, e) in events.iter().enumerate() {
                let delta = live.append(&b, &tr, e.clone(), Utc::now()).unwrap();
                mirror.retain(|(idx, _)| !delta.removed.iter().any(|v| v.index == *idx));
                mirror.extend(delta.added.iter().map(|v| (v.index, v.name.clone())));
                mirror.sort();
                let batch = process_session(&b, &RawSession::new("live", events[..=i].to_vec()), &tr, true).unwrap();
                let tail = &batch.steps[batch.steps.len().saturating_sub(MAX_LIVE_STEPS)..];
                let names: Vec<(usize, String)> = live.views().into_iter().map(|v| (v.index, v.name)).collect();
                ok &= live.steps() == tail && mirror == names && live.steps().len() <= MAX_LIVE_STEPS;
                checks += 1;
            }
            longest = longest.max(live.steps().len());
            agree += ok as usize;
        }
        Outcome::new(
            agree == streams,
            format!("{agree}/{streams} streams agree after every append ({checks} checks, longest live view {longest})"),
        )
    }
}
