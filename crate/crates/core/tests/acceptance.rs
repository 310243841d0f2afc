//! Prints one PASS/FAIL line per headline check, then fails if any failed.

mod common;

use common::criteria::{self, Outcome};

#[test]
fn acceptance() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("log pipeline fixture", criteria::pipeline_fixture),
        ("undo/redo against simulator", || criteria::undo_oracle(10_000)),
        ("multilingual alignment table", criteria::alignment_table),
        ("association ratios against counting", criteria::arm_oracle),
        ("workflow merges and round trips", criteria::bpe_oracle),
        ("analytic gradients", || criteria::gradient_checks(100)),
        ("ranking metrics", || criteria::metric_oracle(10_000)),
        ("focal and multi-task reduction", || criteria::focal_reduction(200)),
        ("causal decoder prefixes", || criteria::causal_contract(100)),
        ("desk learning run", criteria::desk_learning),
        ("live session equivalence", || criteria::live::equivalence(1_000)),
    ];
    let mut failed = Vec::new();
    for (name, run) in checks {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
