//! Masking plans and padded model inputs.

use rand::Rng;

use super::config::Masking;
use crate::augment::dataset::{NormStats, Sequence};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Only the final item is held out and predicted.
    Eval,
}

/// How one sequence of length `n` is presented to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Input rows taken from the sequence (`input_len ≤ n`).
    pub input_len: usize,
    /// Input rows whose fused vector is replaced by the mask embedding.
    pub masked: Vec<usize>,
    /// `(input row, sequence index of the label)`.
    pub labels: Vec<(usize, usize)>,
}

pub fn apply_masking(n: usize, masking: Masking, mode: Mode, ratio: f64, final_only: bool, rng: &mut impl Rng) -> Result<MaskPlan> {
    if n < 2 {
        return Err(CoreError::Config(format!("masking needs at least 2 steps, got {n}")));
    }
    Ok(match (masking, mode) {
        (Masking::Clm, Mode::Train) if !final_only => {
            MaskPlan { input_len: n - 1, masked: vec![], labels: (0..n - 1).map(|t| (t, t + 1)).collect() }
        }
        (Masking::Clm, _) => MaskPlan { input_len: n - 1, masked: vec![], labels: vec![(n - 2, n - 1)] },
        (Masking::Mlm, Mode::Train) => {
            let mut masked: Vec<usize> = (0..n).filter(|_| rng.random_bool(ratio)).collect();
            if masked.is_empty() {
                masked.push(rng.random_range(0..n));
            }
            let labels = masked.iter().map(|&t| (t, t)).collect();
            MaskPlan { input_len: n, masked, labels }
        }
        (Masking::Mlm, Mode::Eval) => MaskPlan { input_len: n, masked: vec![n - 1], labels: vec![(n - 1, n - 1)] },
    })
}

/// Padded batch, `batch × len` rows in row-major order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub len: usize,
    /// Vocabulary id per row; `None` for padding and masked rows.
    pub ids: Vec<Option<u32>>,
    /// Normalized interval and occurrence features.
    pub cont: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub masked: Vec<usize>,
    /// `(row, vocabulary id)`.
    pub labels: Vec<(usize, u32)>,
}

impl ModelInput {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// A step as seen by the model: id plus raw continuous features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub id: u32,
    pub dt: f64,
    pub occurrences: f64,
}

pub fn steps_of(seq: &Sequence) -> Vec<StepInput> {
    (0..seq.len())
        .map(|i| StepInput { id: seq.ids[i], dt: seq.dt[i] as f64, occurrences: seq.occurrences[i] as f64 })
        .collect()
}

pub fn build_input(items: &[(&[StepInput], &MaskPlan)], norm: &NormStats) -> ModelInput {
    let len = items.iter().map(|(_, p)| p.input_len).max().unwrap_or(0).max(1);
    let rows = items.len() * len;
    let mut inp = ModelInput {
        batch: items.len(),
        len,
        ids: vec![None; rows],
        cont: vec![[0.0; 2]; rows],
        valid: vec![false; rows],
        ..Default::default()
    };
    for (b, (steps, plan)) in items.iter().enumerate() {
        let base = b * len;
        for t in 0..plan.input_len {
            inp.valid[base + t] = true;
            if plan.masked.contains(&t) {
                continue;
            }
            let s = steps[t];
            inp.ids[base + t] = Some(s.id);
            inp.cont[base + t] = [norm.dt(s.dt), norm.occ(s.occurrences)];
        }
        inp.masked.extend(plan.masked.iter().map(|&t| base + t));
        inp.labels.extend(plan.labels.iter().map(|&(t, src)| (base + t, steps[src].id)));
    }
    inp
}

/// Inference input predicting what follows `steps`.
pub fn next_step_input(steps: &[StepInput], masking: Masking, max_len: usize, norm: &NormStats) -> ModelInput {
    let keep = match masking {
        Masking::Clm => max_len,
        Masking::Mlm => max_len - 1,
    };
    let steps = &steps[steps.len().saturating_sub(keep)..];
    let n = steps.len();
    let plan = match masking {
        Masking::Clm => MaskPlan { input_len: n, masked: vec![], labels: vec![] },
        Masking::Mlm => MaskPlan { input_len: n + 1, masked: vec![n], labels: vec![] },
    };
    let mut padded = steps.to_vec();
    if masking == Masking::Mlm {
        padded.push(StepInput { id: 0, dt: 0.0, occurrences: 0.0 });
    }
    let mut inp = build_input(&[(&padded, &plan)], norm);
    inp.labels = vec![(plan.input_len - 1, 0)];
    inp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clm_shifts_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = apply_masking(3, Masking::Clm, Mode::Train, 0.15, false, &mut rng).unwrap();
        assert_eq!(p.labels, vec![(0, 1), (1, 2)]);
        assert_eq!(p.input_len, 2);
    }

    #[test]
    fn eval_predicts_only_the_last_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in [Masking::Clm, Masking::Mlm] {
            let p = apply_masking(7, m, Mode::Eval, 0.15, false, &mut rng).unwrap();
            assert_eq!(p.labels.len(), 1);
            assert_eq!(p.labels[0].1, 6);
        }
        assert!(apply_masking(1, Masking::Clm, Mode::Eval, 0.15, false, &mut rng).is_err());
    }

    #[test]
    fn masked_rows_hide_their_id() {
        let steps: Vec<StepInput> = (0..3).map(|i| StepInput { id: i, dt: 1.0, occurrences: 1.0 }).collect();
        let plan = MaskPlan { input_len: 3, masked: vec![2], labels: vec![(2, 2)] };
        let inp = build_input(&[(&steps, &plan)], &NormStats::default());
        assert_eq!(inp.ids, vec![Some(0), Some(1), None]);
        assert_eq!(inp.labels, vec![(2, 2)]);
    }
}
