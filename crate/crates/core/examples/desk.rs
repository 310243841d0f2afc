use std::time::Instant;

use bimflow_core::augment::dataset::Split;
use bimflow_core::model::train::{train, TrainConfig};
use bimflow_core::model::ModelConfig;
use bimflow_core::synthetic::{grammar_dataset, GrammarConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let fusion = args.get(2).is_none_or(|s| s != "baseline");
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let t = Instant::now();
    let ds = grammar_dataset(&GrammarConfig::default()).unwrap();
    println!("dataset {:?} train {} val {} vocab {}", t.elapsed(), ds.split(Split::Train).count(), ds.split(Split::Validation).count(), ds.vocabulary.len());
    let mc = ModelConfig { fusion, ..Default::default() };
    let tc = TrainConfig { epochs, lr, batch, patience: 3, ..Default::default() };
    let out = train(&ds, mc, &tc).unwrap();
    for e in &out.log {
        println!("{:?}", e);
    }
    println!("best {} report {:?} {:?} elapsed {:?}", out.best_epoch, out.report.recall, out.report.ndcg, t.elapsed());
}
