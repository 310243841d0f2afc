//! Evaluation and top-k recommendation.

use bimflow_nn::{Float, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{apply_masking, build_input, next_step_input, steps_of, MaskPlan, Mode, StepInput};
use super::metrics::{rank_of, softmax, top_k, EvaluationReport};
use super::Recommender;
use crate::augment::dataset::{NormStats, Sequence};
use crate::error::{CoreError, Result};
use crate::types::Vocabulary;

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];

/// Keeps the suffix that fits the model: `max_len` inputs plus the held-out
/// item for causal models.
pub(crate) fn fit_suffix<T: Clone>(steps: &[T], max_len: usize, causal: bool) -> &[T] {
    let keep = if causal { max_len + 1 } else { max_len };
    &steps[steps.len().saturating_sub(keep)..]
}

/// Holds out the last item of every sequence and ranks all commands.
pub fn evaluate<T: Float>(
    model: &Recommender<T>,
    seqs: &[&Sequence],
    vocab: &Vocabulary,
    norm: &NormStats,
    ks: &[usize],
    batch: usize,
) -> Result<EvaluationReport> {
    let causal = model.config.backbone.is_decoder();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let items: Vec<(Vec<StepInput>, MaskPlan)> = seqs
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let steps = fit_suffix(&steps_of(s), model.config.max_len, causal).to_vec();
            let plan = apply_masking(steps.len(), model.masking(), Mode::Eval, model.config.mlm_ratio, true, &mut rng)?;
            Ok((steps, plan))
        })
        .collect::<Result<_>>()?;
    let mut ranks = Vec::with_capacity(items.len());
    let mut loss_sum = 0.0;
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<(&[StepInput], &MaskPlan)> = chunk.iter().map(|(s, p)| (s.as_slice(), p)).collect();
        let inp = build_input(&refs, norm);
        let mut g = Graph::new(&model.store);
        let fwd = model.forward(&mut g, &inp)?;
        let rows: Vec<usize> = inp.labels.iter().map(|l| l.0).collect();
        let labels: Vec<u32> = inp.labels.iter().map(|l| l.1).collect();
        let heads = model.predict(&mut g, fwd.hidden, &rows)?;
        let loss = model.total_loss(&mut g, heads, &labels)?;
        loss_sum += g.value(loss).item().to_f64().unwrap() * labels.len() as f64;
        let logits = g.value(heads.cmd);
        for (r, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(r).iter().map(|x| x.to_f64().unwrap()).collect();
            ranks.push((rank_of(&row, label as usize), vocab.name(label).to_string()));
        }
    }
    let mut report = EvaluationReport::from_ranks(&ranks, ks);
    report.loss = (!ranks.is_empty()).then(|| loss_sum / ranks.len() as f64);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recommendation {
    pub id: u32,
    pub probability: f64,
}

/// Distribution over the next command after `steps`.
pub fn next_distribution<T: Float>(model: &Recommender<T>, steps: &[StepInput], norm: &NormStats) -> Result<Vec<f64>> {
    if steps.is_empty() {
        return Err(CoreError::EmptySession);
    }
    let inp = next_step_input(steps, model.masking(), model.config.max_len, norm);
    let logits = model.command_logits(&inp)?;
    Ok(softmax(&logits[0]))
}

/// Top-`k` commands by probability, ties by id.
pub fn recommend_top_k<T: Float>(model: &Recommender<T>, steps: &[StepInput], norm: &NormStats, k: usize) -> Result<Vec<Recommendation>> {
    let probs = next_distribution(model, steps, norm)?;
    Ok(top_k(&probs, k)
        .into_iter()
        .map(|i| Recommendation { id: i as u32, probability: probs[i] })
        .collect())
}
