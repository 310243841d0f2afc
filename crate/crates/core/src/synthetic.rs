//! Seeded second-order Markov session grammar for desk-scale experiments.
//!
//! The next command depends on the previous two commands and on whether the
//! previous step followed quickly or slowly, so a model that sees intervals
//! can beat one that sees ids only.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::providers::StubEmbedder;
use crate::augment::dataset::{finalize_dataset, Dataset, DatasetConfig, ItemInfo};
use crate::augment::features::Step;
use crate::augment::meta::{CommandMeta, Registries};
use crate::error::Result;
use crate::flow::FilterRules;
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{train, TrainConfig};
use crate::model::ModelConfig;
use crate::pipeline::Bundle;
use crate::types::Level;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub commands: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of the major successor within a context.
    pub major: f64,
    /// Probability of a uniformly random successor.
    pub noise: f64,
    /// Residue classes of the second-to-last command.
    pub history_classes: usize,
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            commands: 50,
            sessions: 5000,
            min_len: 12,
            max_len: 30,
            major: 0.75,
            noise: 0.05,
            history_classes: 5,
            seed: 7,
        }
    }
}

pub fn command_name(i: usize) -> String {
    format!("cmd{i:02}")
}

/// Successor table indexed by `[prev][prev2 % classes][slow as usize]`.
pub struct Grammar {
    pub config: GrammarConfig,
    table: Vec<Vec<[(usize, usize); 2]>>,
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.commands;
        let pick = |rng: &mut ChaCha8Rng, avoid: &[usize]| loop {
            let c = rng.random_range(0..n);
            if !avoid.contains(&c) {
                return c;
            }
        };
        let table = (0..n)
            .map(|p| {
                (0..config.history_classes)
                    .map(|_| {
                        let pair = |rng: &mut ChaCha8Rng, avoid: &[usize]| {
                            let a = pick(rng, avoid);
                            let mut av = avoid.to_vec();
                            av.push(a);
                            (a, pick(rng, &av))
                        };
                        let fast = pair(&mut rng, &[p]);
                        let slow = pair(&mut rng, &[p, fast.0, fast.1]);
                        [fast, slow]
                    })
                    .collect()
            })
            .collect();
        Grammar { config, table }
    }

    /// `(major, minor)` successors of a context.
    pub fn successors(&self, prev: usize, prev2: usize, slow: bool) -> (usize, usize) {
        self.table[prev][prev2 % self.config.history_classes][slow as usize]
    }

    fn interval(rng: &mut ChaCha8Rng) -> f64 {
        if rng.random_bool(0.5) {
            rng.random_range(0.5..2.0)
        } else {
            rng.random_range(8.0..30.0)
        }
    }

    pub fn is_slow(dt: f64) -> bool {
        dt >= 5.0
    }

    pub fn sample_session(&self, rng: &mut ChaCha8Rng) -> Vec<Step> {
        let c = &self.config;
        let len = rng.random_range(c.min_len..=c.max_len);
        let n = c.commands;
        let mut ids = vec![rng.random_range(0..n)];
        ids.push((ids[0] + rng.random_range(1..n)) % n);
        let mut dts = vec![0.0, Self::interval(rng)];
        while ids.len() < len {
            let (p2, p1) = (ids[ids.len() - 2], ids[ids.len() - 1]);
            let slow = Self::is_slow(dts[dts.len() - 1]);
            let (major, minor) = self.successors(p1, p2, slow);
            let next = if rng.random_bool(c.noise) {
                (p1 + rng.random_range(1..n)) % n
            } else if rng.random_bool(c.major) {
                major
            } else {
                minor
            };
            ids.push(next);
            dts.push(Self::interval(rng));
        }
        ids.iter()
            .zip(dts)
            .map(|(&i, dt)| Step { name: command_name(i), dt, occurrences: 1 })
            .collect()
    }

    pub fn corpus(&self) -> Vec<Vec<Step>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(31).wrapping_add(1));
        (0..self.config.sessions).map(|_| self.sample_session(&mut rng)).collect()
    }
}

/// Finalized dataset over a step corpus with stub metadata: the type and
/// target labels are residues of the command index.
pub fn dataset_from_steps(corpus: Vec<Vec<Step>>, commands: usize, config: &DatasetConfig) -> Result<Dataset> {
    let mut info = ItemInfo::new();
    let mut metas = HashMap::new();
    for i in 0..commands {
        let name = command_name(i);
        info.insert(name.clone(), (Level::High, Default::default()));
        metas.insert(
            name.clone(),
            CommandMeta {
                name: name.clone(),
                description: format!("command {name} of family {}", i % 7),
                type_label: format!("type{}", i % 7),
                target_label: format!("target{}", i % 11),
                is_workflow: false,
                constituents: vec![],
                flagged: false,
            },
        );
    }
    let embedder = StubEmbedder::new(16);
    finalize_dataset(corpus, &info, &HashMap::new(), &metas, &Registries::default(), &embedder, config)
}

pub fn grammar_dataset(config: &GrammarConfig) -> Result<Dataset> {
    let g = Grammar::new(config.clone());
    dataset_from_steps(g.corpus(), config.commands, &DatasetConfig::default())
}

/// A checkpoint trained on the grammar plus a pass-through bundle over the same
/// vocabulary: enough to run live sessions without a real corpus.
pub fn grammar_service(grammar: &GrammarConfig, model: ModelConfig, tc: &TrainConfig) -> Result<(Checkpoint, Bundle)> {
    let ds = grammar_dataset(grammar)?;
    let outcome = train(&ds, model, tc)?;
    let bundle = Bundle {
        rules: FilterRules::default(),
        dictionary: Default::default(),
        mapping: Default::default(),
        window: 10,
        bpe: Default::default(),
        vocabulary: ds.vocabulary.clone(),
    };
    let checkpoint = Checkpoint {
        model: outcome.model,
        vocabulary: ds.vocabulary,
        catalog: ds.catalog,
        norm: ds.norm,
        metrics: Some(outcome.report),
    };
    Ok((checkpoint, bundle))
}
