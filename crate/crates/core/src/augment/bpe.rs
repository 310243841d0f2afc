//! Workflow discovery by merging the most frequent adjacent command pair.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::features::Step;

/// Separator between constituents in a workflow token name.
pub const WORKFLOW_SEP: &str = "; ";

pub fn merged_name(left: &str, right: &str) -> String {
    format!("{left}{WORKFLOW_SEP}{right}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    /// Requested merge count; more than `merges.len()` when pairs ran out.
    pub requested: usize,
}

fn pair_counts(corpus: &[Vec<String>]) -> BTreeMap<(&str, &str), usize> {
    let mut counts = BTreeMap::new();
    for seq in corpus {
        for w in seq.windows(2) {
            *counts.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += 1;
        }
    }
    counts
}

/// One left-to-right greedy pass replacing `left, right` with the merged token.
pub fn merge_pass<T: Clone>(seq: &[T], is_left: impl Fn(&T) -> bool, is_right: impl Fn(&T) -> bool, join: impl Fn(&T, &T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && is_left(&seq[i]) && is_right(&seq[i + 1]) {
            out.push(join(&seq[i], &seq[i + 1]));
            i += 2;
        } else {
            out.push(seq[i].clone());
            i += 1;
        }
    }
    out
}

fn merge_names(seq: &[String], l: &str, r: &str) -> Vec<String> {
    merge_pass(seq, |a| a == l, |b| b == r, |a, b| merged_name(a, b))
}

/// Learns up to `num_merges` merges. Pairs never span sessions; ties go to
/// the lexicographically smallest `(left, right)`.
pub fn learn_workflows(corpus: &[Vec<String>], num_merges: usize) -> BpeModel {
    let mut corpus: Vec<Vec<String>> = corpus.to_vec();
    let mut model = BpeModel { merges: Vec::new(), requested: num_merges };
    for _ in 0..num_merges {
        let best = {
            let counts = pair_counts(&corpus);
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, n) in counts {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((pair, n));
                }
            }
            best.map(|((l, r), _)| (l.to_string(), r.to_string()))
        };
        let Some((l, r)) = best else { break };
        for seq in &mut corpus {
            *seq = merge_names(seq, &l, &r);
        }
        model.merges.push((l, r));
    }
    if model.merges.len() < num_merges {
        tracing::info!(learned = model.merges.len(), requested = num_merges, "corpus ran out of adjacent pairs");
    }
    model
}

impl BpeModel {
    pub fn encode(&self, seq: &[String]) -> Vec<String> {
        let mut seq = seq.to_vec();
        for (l, r) in &self.merges {
            seq = merge_names(&seq, l, r);
        }
        seq
    }

    /// Applies the merges to featureized steps. A merged step keeps the
    /// interval of its first constituent and sums occurrences.
    pub fn encode_steps(&self, steps: &[Step]) -> Vec<Step> {
        let mut steps = steps.to_vec();
        for (l, r) in &self.merges {
            steps = merge_pass(
                &steps,
                |a| &a.name == l,
                |b| &b.name == r,
                |a, b| Step {
                    name: merged_name(&a.name, &b.name),
                    dt: a.dt,
                    occurrences: a.occurrences + b.occurrences,
                },
            );
        }
        steps
    }

    /// Workflow token → its two operands.
    pub fn operands(&self) -> HashMap<String, (String, String)> {
        self.merges.iter().map(|(l, r)| (merged_name(l, r), (l.clone(), r.clone()))).collect()
    }

    /// Fully expanded constituents of every workflow token, in merge order.
    pub fn workflows(&self) -> Vec<(String, Vec<String>)> {
        let ops = self.operands();
        self.merges
            .iter()
            .map(|(l, r)| {
                let name = merged_name(l, r);
                let parts = expand(&name, &ops);
                (name, parts)
            })
            .collect()
    }

    pub fn decode(&self, seq: &[String]) -> Vec<String> {
        let ops = self.operands();
        seq.iter().flat_map(|t| expand(t, &ops)).collect()
    }
}

fn expand(token: &str, ops: &HashMap<String, (String, String)>) -> Vec<String> {
    match ops.get(token) {
        Some((l, r)) => {
            let mut v = expand(l, ops);
            v.extend(expand(r, ops));
            v
        }
        None => vec![token.to_string()],
    }
}
