//! Dataset finalization, splitting and the binary dataset container.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::Step;
use super::meta::{CommandMeta, Registries};
use crate::align::providers::Embedder;
use crate::error::{io_err, CoreError, Result};
use crate::io::{create, open, read_container, write_container};
use crate::types::{Level, VocabItem, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub min_session: usize,
    pub min_count: usize,
    pub max_len: usize,
    pub min_sub_len: usize,
    pub split: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { min_session: 5, min_count: 10, max_len: 110, min_sub_len: 10, split: 0.85, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    /// Vocabulary ids.
    pub ids: Vec<u32>,
    /// Raw seconds since the previous step.
    pub dt: Vec<f32>,
    pub occurrences: Vec<f32>,
    pub split: Split,
    /// Copy added by the split repair pass.
    pub duplicate: bool,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-item side information, indexed by vocabulary id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub meta: Vec<CommandMeta>,
    pub registries: Registries,
    pub type_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Unit description embeddings.
    pub descriptions: Vec<Vec<f32>>,
}

impl Catalog {
    pub fn build(vocab: &Vocabulary, metas: &HashMap<String, CommandMeta>, registries: &Registries, embedder: &dyn Embedder) -> Result<Self> {
        let mut c = Catalog { registries: registries.clone(), ..Default::default() };
        for item in vocab.items() {
            let mut m = metas.get(&item.name).cloned().unwrap_or_else(|| CommandMeta::unknown(&item.name));
            m.is_workflow = item.is_workflow();
            m.constituents = item.constituents.clone();
            c.type_ids.push(c.registries.types.intern(&m.type_label));
            c.target_ids.push(c.registries.targets.intern(&m.target_label));
            let text = if m.description.is_empty() { &m.name } else { &m.description };
            c.descriptions.push(embedder.embed(text)?.into_iter().map(|x| x as f32).collect());
            c.meta.push(m);
        }
        Ok(c)
    }

    pub fn description_dim(&self) -> usize {
        self.descriptions.first().map_or(0, Vec::len)
    }
}

/// z-normalization statistics of `ln(1 + x)` for both continuous features,
/// computed on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub dt_mean: f64,
    pub dt_std: f64,
    pub occ_mean: f64,
    pub occ_std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { dt_mean: 0.0, dt_std: 1.0, occ_mean: 0.0, occ_std: 1.0 }
    }
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        s += x;
        s2 += x * x;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let m = s / n as f64;
    let sd = (s2 / n as f64 - m * m).max(0.0).sqrt();
    (m, if sd > 1e-6 { sd } else { 1.0 })
}

impl NormStats {
    pub fn fit<'a>(seqs: impl Iterator<Item = &'a Sequence> + Clone) -> Self {
        let (dt_mean, dt_std) = mean_std(seqs.clone().flat_map(|s| s.dt.iter().map(|&x| (x as f64).ln_1p())));
        let (occ_mean, occ_std) = mean_std(seqs.flat_map(|s| s.occurrences.iter().map(|&x| (x as f64).ln_1p())));
        NormStats { dt_mean, dt_std, occ_mean, occ_std }
    }

    pub fn dt(&self, x: f64) -> f64 {
        (x.max(0.0).ln_1p() - self.dt_mean) / self.dt_std
    }

    pub fn occ(&self, x: f64) -> f64 {
        (x.max(0.0).ln_1p() - self.occ_mean) / self.occ_std
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub sessions_in: usize,
    pub dropped_short: usize,
    pub dropped_rare_items: usize,
    pub subsequences: usize,
    pub train: usize,
    pub validation: usize,
    pub moved: usize,
    pub duplicated: usize,
    /// Items whose coverage of both splits needed a duplicated sequence.
    pub duplicated_items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub catalog: Catalog,
    pub norm: NormStats,
    pub config: DatasetConfig,
    pub report: SplitReport,
    pub sequences: Vec<Sequence>,
}

/// Level and source ids per canonical name.
pub type ItemInfo = HashMap<String, (Level, BTreeSet<i64>)>;

/// Drops short sessions and rare commands (to a fixpoint), cuts long
/// sessions into random-length ordered pieces, and splits with a repair pass
/// so that both splits cover the vocabulary.
pub fn finalize_steps(sessions: Vec<Vec<Step>>, config: &DatasetConfig) -> (Vec<Vec<Step>>, SplitReport) {
    let mut report = SplitReport { sessions_in: sessions.len(), ..Default::default() };
    let mut sessions = sessions;
    let mut dropped_items = BTreeSet::new();
    loop {
        let before = sessions.len();
        sessions.retain(|s| s.len() >= config.min_session);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for st in s {
                *counts.entry(st.name.as_str()).or_default() += 1;
            }
        }
        let rare: BTreeSet<String> = counts
            .into_iter()
            .filter(|&(_, n)| n < config.min_count)
            .map(|(k, _)| k.to_string())
            .collect();
        if rare.is_empty() && sessions.len() == before {
            break;
        }
        for s in &mut sessions {
            *s = drop_items(s, &rare);
        }
        dropped_items.extend(rare);
    }
    report.dropped_short = report.sessions_in - sessions.len();
    report.dropped_rare_items = dropped_items.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for s in sessions {
        out.extend(cut_long(s, config.min_sub_len, config.max_len, &mut rng));
    }
    report.subsequences = out.len();
    (out, report)
}

/// Removes steps whose name is in `rare`; their interval carries into the
/// next surviving step.
fn drop_items(s: &[Step], rare: &BTreeSet<String>) -> Vec<Step> {
    let mut out: Vec<Step> = Vec::with_capacity(s.len());
    let mut carry = 0.0;
    for st in s {
        if rare.contains(&st.name) {
            carry += st.dt;
            continue;
        }
        let mut st = st.clone();
        if !out.is_empty() {
            st.dt += carry;
        }
        carry = 0.0;
        out.push(st);
    }
    out
}

/// Consecutive pieces, each of length in `[lo, hi]`, when `len > hi`.
pub fn cut_long<T>(s: Vec<T>, lo: usize, hi: usize, rng: &mut impl Rng) -> Vec<Vec<T>> {
    let lo = lo.max(1).min(hi / 2).max(1);
    let mut out = Vec::new();
    let mut rest = s;
    while rest.len() > hi {
        let upper = hi.min(rest.len() - lo);
        let take = rng.random_range(lo..=upper);
        let tail = rest.split_off(take);
        out.push(rest);
        rest = tail;
    }
    out.push(rest);
    out
}

pub fn build_vocabulary(sessions: &[Vec<Step>], info: &ItemInfo, workflows: &HashMap<String, Vec<String>>) -> Vocabulary {
    let names: BTreeSet<&str> = sessions.iter().flatten().map(|s| s.name.as_str()).collect();
    let mut v = Vocabulary::new();
    for name in names {
        let constituents = workflows.get(name).cloned().unwrap_or_default();
        let lookup = constituents.first().map_or(name, String::as_str);
        let (level, ids) = info.get(lookup).cloned().unwrap_or((Level::High, BTreeSet::new()));
        let item = VocabItem { name: name.to_string(), level, source_ids: ids, constituents };
        v.push(item).expect("names are unique");
    }
    v
}

pub fn finalize_dataset(
    sessions: Vec<Vec<Step>>,
    info: &ItemInfo,
    workflows: &HashMap<String, Vec<String>>,
    metas: &HashMap<String, CommandMeta>,
    registries: &Registries,
    embedder: &dyn Embedder,
    config: &DatasetConfig,
) -> Result<Dataset> {
    if !(config.split > 0.0 && config.split < 1.0) || config.max_len == 0 {
        return Err(CoreError::Config(format!("invalid dataset config {config:?}")));
    }
    let (steps, mut report) = finalize_steps(sessions, config);
    let vocabulary = build_vocabulary(&steps, info, workflows);
    let mut sequences: Vec<Sequence> = steps
        .iter()
        .map(|s| Sequence {
            ids: s.iter().map(|st| vocabulary.id(&st.name).unwrap()).collect(),
            dt: s.iter().map(|st| st.dt as f32).collect(),
            occurrences: s.iter().map(|st| st.occurrences as f32).collect(),
            split: Split::Train,
            duplicate: false,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    assign_splits(&mut sequences, &vocabulary, config.split, &mut rng, &mut report);
    let norm = NormStats::fit(sequences.iter().filter(|s| s.split == Split::Train));
    let catalog = Catalog::build(&vocabulary, metas, registries, embedder)?;
    Ok(Dataset { vocabulary, catalog, norm, config: config.clone(), report, sequences })
}

fn assign_splits(seqs: &mut Vec<Sequence>, vocab: &Vocabulary, frac: f64, rng: &mut impl Rng, report: &mut SplitReport) {
    let n = seqs.len();
    if n == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = if n >= 2 { ((frac * n as f64).round() as usize).clamp(1, n - 1) } else { 1 };
    for (rank, &i) in order.iter().enumerate() {
        seqs[i].split = if rank < n_train { Split::Train } else { Split::Validation };
    }
    let items: Vec<BTreeSet<u32>> = seqs.iter().map(|s| s.ids.iter().copied().collect()).collect();
    let mut cover: HashMap<Split, Vec<usize>> = HashMap::new();
    for sp in [Split::Train, Split::Validation] {
        cover.insert(sp, vec![0; vocab.len()]);
    }
    for (s, its) in seqs.iter().zip(&items) {
        let c = cover.get_mut(&s.split).unwrap();
        for &i in its {
            c[i as usize] += 1;
        }
    }
    for item in 0..vocab.len() as u32 {
        for (want, other) in [(Split::Train, Split::Validation), (Split::Validation, Split::Train)] {
            if cover[&want][item as usize] > 0 {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&s| seqs[s].split == other && items[s].contains(&item)).collect();
            let movable = candidates
                .iter()
                .copied()
                .filter(|&s| items[s].iter().all(|&j| cover[&other][j as usize] >= 2))
                .min_by_key(|&s| (seqs[s].len(), s));
            let chosen = movable.unwrap_or_else(|| *candidates.iter().min_by_key(|&&s| (seqs[s].len(), s)).unwrap());
            if movable.is_some() {
                seqs[chosen].split = want;
                for &j in &items[chosen] {
                    cover.get_mut(&other).unwrap()[j as usize] -= 1;
                }
                report.moved += 1;
            } else {
                let mut copy = seqs[chosen].clone();
                copy.split = want;
                copy.duplicate = true;
                seqs.push(copy);
                report.duplicated += 1;
                report.duplicated_items.push(vocab.name(item).to_string());
            }
            for &j in &items[chosen] {
                cover.get_mut(&want).unwrap()[j as usize] += 1;
            }
        }
    }
    report.train = seqs.iter().filter(|s| s.split == Split::Train).count();
    report.validation = seqs.len() - report.train;
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    /// Vocabulary ids referenced by a split.
    pub fn items_in(&self, split: Split) -> BTreeSet<u32> {
        self.split(split).flat_map(|s| s.ids.iter().copied()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    vocabulary: Vocabulary,
    catalog: Catalog,
    norm: NormStats,
    config: DatasetConfig,
    report: SplitReport,
    counts: BTreeMap<String, usize>,
}

fn encode_sequence(s: &Sequence) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + s.len() * 12);
    b.push(match s.split {
        Split::Train => 0,
        Split::Validation => 1,
    });
    b.push(s.duplicate as u8);
    b.extend([0, 0]);
    b.extend((s.len() as u32).to_le_bytes());
    for &id in &s.ids {
        b.extend(id.to_le_bytes());
    }
    for &x in s.dt.iter().chain(&s.occurrences) {
        b.extend(x.to_le_bytes());
    }
    b
}

fn decode_sequence(b: &[u8]) -> Result<Sequence> {
    let bad = || CoreError::Container("malformed sequence record".into());
    if b.len() < 8 {
        return Err(bad());
    }
    let n = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    if b.len() != 8 + n * 12 {
        return Err(bad());
    }
    let word = |i: usize| -> [u8; 4] { b[8 + 4 * i..12 + 4 * i].try_into().unwrap() };
    Ok(Sequence {
        split: match b[0] {
            0 => Split::Train,
            1 => Split::Validation,
            _ => return Err(bad()),
        },
        duplicate: b[1] != 0,
        ids: (0..n).map(|i| u32::from_le_bytes(word(i))).collect(),
        dt: (n..2 * n).map(|i| f32::from_le_bytes(word(i))).collect(),
        occurrences: (2 * n..3 * n).map(|i| f32::from_le_bytes(word(i))).collect(),
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_dataset_to(dataset, &mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn write_dataset_to<W: Write>(d: &Dataset, w: &mut W) -> Result<()> {
    let counts = BTreeMap::from([
        ("sequences".to_string(), d.sequences.len()),
        ("steps".to_string(), d.sequences.iter().map(Sequence::len).sum()),
        ("vocabulary".to_string(), d.vocabulary.len()),
    ]);
    let header = DatasetHeader {
        vocabulary: d.vocabulary.clone(),
        catalog: d.catalog.clone(),
        norm: d.norm,
        config: d.config.clone(),
        report: d.report.clone(),
        counts,
    };
    write_container(w, "dataset", &header, d.sequences.iter().map(encode_sequence))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(&mut open(path)?)
}

pub fn read_dataset_from<R: std::io::Read>(r: &mut R) -> Result<Dataset> {
    let (h, records): (DatasetHeader, _) = read_container(r, "dataset")?;
    let sequences = records.iter().map(|b| decode_sequence(b)).collect::<Result<Vec<_>>>()?;
    for s in &sequences {
        if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= h.vocabulary.len()) {
            return Err(CoreError::Container(format!("sequence references id {bad} outside the vocabulary")));
        }
    }
    Ok(Dataset {
        vocabulary: h.vocabulary,
        catalog: h.catalog,
        norm: h.norm,
        config: h.config,
        report: h.report,
        sequences,
    })
}
