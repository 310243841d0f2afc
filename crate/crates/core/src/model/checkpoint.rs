//! Checkpoint container: JSON header plus a raw little-endian tensor section.

use std::io::{Read, Write};
use std::path::Path;

use bimflow_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::EvaluationReport;
use super::{ItemTable, ModelConfig, Recommender};
use crate::augment::dataset::{Catalog, NormStats};
use crate::error::{io_err, CoreError, Result};
use crate::io::{create, open, read_container, write_container};
use crate::types::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the tensor section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    vocab_hash: String,
    vocabulary: Vocabulary,
    catalog: Catalog,
    norm: NormStats,
    metrics: Option<EvaluationReport>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to serve it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Recommender<f32>,
    pub vocabulary: Vocabulary,
    pub catalog: Catalog,
    pub norm: NormStats,
    pub metrics: Option<EvaluationReport>,
}

impl Checkpoint {
    /// Short content hash identifying this checkpoint.
    pub fn version(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.vocabulary.hash().as_bytes());
        for (_, p) in self.model.store.iter() {
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        for (_, p) in self.model.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len() as u64,
            });
            for x in p.value.data() {
                bytes.extend(x.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            vocab_hash: self.vocabulary.hash(),
            vocabulary: self.vocabulary.clone(),
            catalog: self.catalog.clone(),
            norm: self.norm,
            metrics: self.metrics.clone(),
            tensors,
        };
        write_container(w, "checkpoint", &header, [bytes])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        self.write_to(&mut w)?;
        w.flush().map_err(io_err(path))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (h, records): (CheckpointHeader, _) = read_container(r, "checkpoint")?;
        if h.vocabulary.hash() != h.vocab_hash {
            return Err(CoreError::Container("vocabulary does not match its recorded hash".into()));
        }
        let bytes = records.into_iter().next().unwrap_or_default();
        let (dims, items) = ItemTable::from_catalog(&h.catalog);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Recommender::<f32>::new(h.model, dims, items, &mut rng)?;
        if h.tensors.len() != model.store.len() {
            return Err(CoreError::Container(format!(
                "checkpoint has {} tensors, architecture needs {}",
                h.tensors.len(),
                model.store.len()
            )));
        }
        for t in &h.tensors {
            if t.dtype != "f32" {
                return Err(CoreError::Container(format!("unsupported dtype {}", t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let slice = bytes
                .get(start..start + 4 * n)
                .ok_or_else(|| CoreError::Container(format!("tensor {} out of bounds", t.name)))?;
            let data = slice.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            model.store.set_by_name(&t.name, Tensor::from_vec(t.shape.clone(), data))?;
        }
        Ok(Checkpoint { model, vocabulary: h.vocabulary, catalog: h.catalog, norm: h.norm, metrics: h.metrics })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut open(path)?)
    }
}
