mod common;

use bimflow_core::model::metrics::{ndcg_at, rank_of, recall_at, top_k};
use common::criteria::metric_oracle;
use common::*;
use proptest::prelude::*;

#[test]
fn metrics_match_sorting() {
    let o = metric_oracle(10_000);
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn ndcg_at_rank_two() {
    assert!((ndcg_at(2, 5) - 1.0 / 3f64.log2()).abs() < 1e-12);
    assert_eq!(ndcg_at(6, 5), 0.0);
}

proptest! {
    #[test]
    fn metrics_grow_with_k(scores in prop::collection::vec(-3i32..3, 1..30), t in any::<prop::sample::Index>(), k in 1usize..30) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = t.index(scores.len());
        let r = rank_of(&scores, target);
        prop_assert_eq!(r, brute_rank(&scores, target));
        prop_assert!(recall_at(r, k) <= recall_at(r, k + 1));
        prop_assert!(ndcg_at(r, k) <= ndcg_at(r, k + 1));
        prop_assert!(ndcg_at(r, k) <= recall_at(r, k));
        prop_assert_eq!(top_k(&scores, k).contains(&target), recall_at(r, k) == 1.0);
    }
}
