//! Ranking metrics and top-k selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// 1-based rank of `target`; ties are ordered by id.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Indices of the `k` largest scores, descending, ties by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandBreakdown {
    pub instances: usize,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub instances: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Keyed by the ground-truth command name.
    #[serde(default)]
    pub per_command: BTreeMap<String, CommandBreakdown>,
    #[serde(default)]
    pub loss: Option<f64>,
}

impl EvaluationReport {
    /// Aggregates `(rank, command name)` pairs.
    pub fn from_ranks(ranks: &[(usize, String)], ks: &[usize]) -> Self {
        let n = ranks.len();
        let mut r = EvaluationReport { instances: n, ..Default::default() };
        for &k in ks {
            let denom = n.max(1) as f64;
            r.recall.insert(k, ranks.iter().map(|(p, _)| recall_at(*p, k)).sum::<f64>() / denom);
            r.ndcg.insert(k, ranks.iter().map(|(p, _)| ndcg_at(*p, k)).sum::<f64>() / denom);
        }
        for (p, name) in ranks {
            let e = r.per_command.entry(name.clone()).or_default();
            e.instances += 1;
            e.recall_at_10 += recall_at(*p, 10);
        }
        for e in r.per_command.values_mut() {
            e.recall_at_10 /= e.instances as f64;
        }
        r
    }

    pub fn markdown_row(&self, label: &str) -> String {
        let cell = |m: &BTreeMap<usize, f64>, k| m.get(&k).map_or("-".to_string(), |v| format!("{:.4}", v));
        format!(
            "| {label} | {} | {} | {} | {} | {} | {} |",
            cell(&self.recall, 3),
            cell(&self.recall, 5),
            cell(&self.recall, 10),
            cell(&self.ndcg, 3),
            cell(&self.ndcg, 5),
            cell(&self.ndcg, 10)
        )
    }

    pub const MARKDOWN_HEADER: &'static str =
        "| model | Recall@3 | Recall@5 | Recall@10 | NDCG@3 | NDCG@5 | NDCG@10 |\n|---|---|---|---|---|---|---|";
}
