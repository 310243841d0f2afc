//! Mini-batch training with linear decay, validation and early stopping.

use std::collections::BTreeMap;

use bimflow_nn::{optim::linear_decay, Adam, AdamConfig, Graph, NodeId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{apply_masking, build_input, steps_of, MaskPlan, Mode, StepInput};
use super::infer::{evaluate, fit_suffix, DEFAULT_KS};
use super::metrics::EvaluationReport;
use super::{ItemTable, ModelConfig, Recommender};
use crate::augment::dataset::{Dataset, NormStats, Split};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Split each batch into similar-length groups to reduce padding.
    pub bucket: bool,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    pub ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 128,
            lr: 3e-5,
            seed: 42,
            patience: 2,
            bucket: true,
            clip_norm: Some(1.0),
            weight_decay: 0.0,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

pub struct TrainOutcome {
    pub model: Recommender<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation report of the returned (best) model.
    pub report: EvaluationReport,
}

pub fn init_model(dataset: &Dataset, config: ModelConfig, seed: u64) -> Result<Recommender<f32>> {
    let (dims, items) = ItemTable::from_catalog(&dataset.catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Recommender::new(config, dims, items, &mut rng)
}

/// Groups batch members of similar input length; each group is one padded
/// sub-batch.
fn groups(items: &[(Vec<StepInput>, MaskPlan)], bucket: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    if !bucket {
        return vec![idx];
    }
    idx.sort_by_key(|&i| (items[i].1.input_len, i));
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut sum = 0usize;
    for i in idx {
        let len = items[i].1.input_len;
        // lengths are ascending, so `len` is the padded width if `i` joins
        if !cur.is_empty() && len * (cur.len() + 1) > (sum + len) * 5 / 4 {
            out.push(std::mem::take(&mut cur));
            sum = 0;
        }
        cur.push(i);
        sum += len;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Label-weighted mean loss of a batch, assembled in one graph.
pub fn batch_loss(
    model: &Recommender<f32>,
    g: &mut Graph<'_, f32>,
    items: &[(Vec<StepInput>, MaskPlan)],
    norm: &NormStats,
    bucket: bool,
) -> Result<NodeId> {
    let total: usize = items.iter().map(|(_, p)| p.labels.len()).sum();
    let mut acc: Option<NodeId> = None;
    for grp in groups(items, bucket) {
        let refs: Vec<(&[StepInput], &MaskPlan)> = grp.iter().map(|&i| (items[i].0.as_slice(), &items[i].1)).collect();
        let inp = build_input(&refs, norm);
        let l = model.loss(g, &inp)?;
        let l = g.scale(l, inp.labels.len() as f32 / total as f32);
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| CoreError::Config("empty batch".into()))
}

pub fn train(dataset: &Dataset, config: ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    let model = init_model(dataset, config, tc.seed)?;
    train_from(model, dataset, tc)
}

pub fn train_from(mut model: Recommender<f32>, dataset: &Dataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    let causal = model.config.backbone.is_decoder();
    let train: Vec<Vec<StepInput>> = dataset
        .split(Split::Train)
        .filter(|s| s.len() >= 2)
        .map(|s| fit_suffix(&steps_of(s), model.config.max_len, causal).to_vec())
        .collect();
    let val: Vec<_> = dataset.split(Split::Validation).collect();
    if train.is_empty() || tc.epochs == 0 {
        return Err(CoreError::Config("training needs at least one epoch and one usable sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let batch = tc.batch.max(1);
    let per_epoch = train.len().div_ceil(batch);
    let total_steps = (tc.epochs * per_epoch) as u64;
    let mut adam = Adam::new(
        AdamConfig { lr: tc.lr, clip_norm: tc.clip_norm, weight_decay: tc.weight_decay, ..AdamConfig::default() },
        &model.store,
    );
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, bimflow_nn::ParamStore<f32>)> = None;
    let mut waited = 0;
    let mut step = 0u64;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        let mut lr = tc.lr;
        for chunk in order.chunks(batch) {
            let items: Vec<(Vec<StepInput>, MaskPlan)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let c = &model.config;
                    let plan = apply_masking(s.len(), c.masking(), Mode::Train, c.mlm_ratio, c.final_only, &mut rng)?;
                    Ok((s.clone(), plan))
                })
                .collect::<Result<_>>()?;
            let grads = {
                let mut g = Graph::new(&model.store);
                let loss = batch_loss(&model, &mut g, &items, &dataset.norm, tc.bucket)?;
                let v = g.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(CoreError::Diverged { epoch, step: step as usize, loss: v });
                }
                loss_sum += v * chunk.len() as f64;
                n += chunk.len();
                g.backward(loss)?
            };
            lr = linear_decay(tc.lr, step, total_steps);
            adam.step(&mut model.store, &grads, lr);
            step += 1;
        }
        let report = evaluate(&model, &val, &dataset.vocabulary, &dataset.norm, &tc.ks, 256)?;
        let val_loss = report.loss.unwrap_or(f64::NAN);
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            val_loss,
            lr,
            recall: report.recall.clone(),
            ndcg: report.ndcg.clone(),
        };
        tracing::info!(epoch, train_loss = entry.train_loss, val_loss, recall = ?entry.recall, "epoch done");
        log.push(entry);
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b || b.is_nan());
        if improved {
            best = Some((val_loss, epoch, model.store.clone()));
            waited = 0;
        } else {
            waited += 1;
            if waited >= tc.patience.max(1) {
                tracing::info!(epoch, "early stopping");
                break;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    let report = evaluate(&model, &val, &dataset.vocabulary, &dataset.norm, &tc.ks, 256)?;
    Ok(TrainOutcome { model, log, best_epoch, report })
}
