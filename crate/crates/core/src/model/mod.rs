//! Next-command model: attention feature fusion, a selectable Transformer
//! backbone and three prediction heads trained with focal loss.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod metrics;
pub mod train;

use bimflow_nn::{
    AttentionConfig, Embedding, FeedForward, FfnKind, Float, Graph, Linear, MoeConfig, MoeFeedForward, MultiHeadAttention,
    NodeId, Norm, NormKind, ParamId, ParamStore, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::dataset::Catalog;
use crate::error::{CoreError, Result};
use batch::ModelInput;
pub use config::{BackboneKind, LossConfig, Masking, ModelConfig};

/// Number of fused features per step: id, type, target, continuous, description.
pub const FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub types: usize,
    pub targets: usize,
    pub desc_dim: usize,
}

/// Per-item categorical ids and description embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTable {
    pub type_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// `[vocab, desc_dim]`, row-major.
    pub desc: Vec<f64>,
}

impl ItemTable {
    pub fn from_catalog(c: &Catalog) -> (Dims, ItemTable) {
        let desc_dim = c.description_dim().max(1);
        let mut desc = Vec::with_capacity(c.descriptions.len() * desc_dim);
        for d in &c.descriptions {
            desc.extend((0..desc_dim).map(|i| d.get(i).copied().unwrap_or(0.0) as f64));
        }
        let dims = Dims {
            vocab: c.type_ids.len(),
            types: c.registries.types.len().max(1),
            targets: c.registries.targets.len().max(1),
            desc_dim,
        };
        let table = ItemTable {
            type_ids: c.type_ids.iter().map(|&x| x as usize).collect(),
            target_ids: c.target_ids.iter().map(|&x| x as usize).collect(),
            desc,
        };
        (dims, table)
    }
}

#[derive(Debug, Clone)]
struct Fusion {
    type_emb: Embedding,
    target_emb: Embedding,
    cont: Linear,
    desc: Linear,
    attn: MultiHeadAttention,
    /// Pooling query `[D, 1]`.
    query: ParamId,
}

#[derive(Debug, Clone)]
enum Ffn {
    Dense(FeedForward),
    Moe(MoeFeedForward),
}

impl Ffn {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(match self {
            Ffn::Dense(f) => f.forward(g, x)?,
            Ffn::Moe(m) => m.forward(g, x)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn: MultiHeadAttention,
    norm1: Norm,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layers {
    id_emb: Embedding,
    fusion: Option<Fusion>,
    positions: Option<Embedding>,
    mask: ParamId,
    blocks: Vec<Block>,
    final_norm: Option<Norm>,
    head_cmd: Linear,
    head_type: Linear,
    head_target: Linear,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Backbone hidden states `[rows, D]`.
    pub hidden: NodeId,
    /// Fusion pooling weights `[rows, K]`.
    pub alpha: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub cmd: NodeId,
    pub typ: NodeId,
    pub target: NodeId,
}

#[derive(Debug, Clone)]
pub struct Recommender<T: Float> {
    pub config: ModelConfig,
    pub dims: Dims,
    pub items: ItemTable,
    pub store: ParamStore<T>,
    layers: Layers,
}

impl<T: Float> Recommender<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, dims: Dims, items: ItemTable, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if items.type_ids.len() != dims.vocab || items.desc.len() != dims.vocab * dims.desc_dim {
            return Err(CoreError::Config("item table does not match the vocabulary".into()));
        }
        let d = config.dim;
        let mut s = ParamStore::new();
        let id_emb = Embedding::new(&mut s, "embed.id", dims.vocab + 1, d, rng);
        let fusion = if config.fusion {
            Some(Fusion {
                type_emb: Embedding::new(&mut s, "embed.type", dims.types, d, rng),
                target_emb: Embedding::new(&mut s, "embed.target", dims.targets, d, rng),
                cont: Linear::new(&mut s, "embed.cont", 2, d, true, rng),
                desc: Linear::new(&mut s, "embed.desc", dims.desc_dim, d, true, rng),
                attn: MultiHeadAttention::new(
                    &mut s,
                    "fusion.attn",
                    AttentionConfig { model_dim: d, num_heads: config.fusion_heads, kv_groups: config.fusion_heads, causal: false, rope: false },
                    rng,
                )?,
                query: s.add("fusion.query", Tensor::randn(vec![d, 1], (1.0 / d as f64).sqrt(), rng)),
            })
        } else {
            None
        };
        let kind = config.backbone;
        let positions = (!kind.is_decoder()).then(|| Embedding::new(&mut s, "embed.position", config.max_len, d, rng));
        let mask = s.add("embed.mask", Tensor::randn(vec![1, d], 0.02, rng));
        let norm = if kind.is_decoder() { NormKind::RmsNorm } else { NormKind::LayerNorm };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("block{l}");
            let attn = AttentionConfig {
                model_dim: d,
                num_heads: config.heads,
                kv_groups: if kind.is_decoder() { config.kv_groups } else { config.heads },
                causal: kind.is_decoder(),
                rope: kind.is_decoder(),
            };
            let ffn = match kind {
                BackboneKind::EncoderOnly => {
                    Ffn::Dense(FeedForward::new(&mut s, &format!("{name}.ffn"), FfnKind::GeluMlp, d, config.ffn_hidden, rng))
                }
                BackboneKind::DecoderOnly => {
                    Ffn::Dense(FeedForward::new(&mut s, &format!("{name}.ffn"), FfnKind::SwigluMlp, d, config.ffn_hidden, rng))
                }
                BackboneKind::DecoderMoe => Ffn::Moe(MoeFeedForward::new(
                    &mut s,
                    &format!("{name}.moe"),
                    d,
                    MoeConfig::new(config.ffn_hidden),
                    rng,
                )?),
            };
            blocks.push(Block {
                attn: MultiHeadAttention::new(&mut s, &format!("{name}.attn"), attn, rng)?,
                norm1: Norm::new(&mut s, &format!("{name}.norm1"), norm, d),
                norm2: Norm::new(&mut s, &format!("{name}.norm2"), norm, d),
                ffn,
            });
        }
        let final_norm = kind.is_decoder().then(|| Norm::new(&mut s, "final_norm", NormKind::RmsNorm, d));
        let layers = Layers {
            id_emb,
            fusion,
            positions,
            mask,
            blocks,
            final_norm,
            head_cmd: Linear::new(&mut s, "head.cmd", d, dims.vocab, true, rng),
            head_type: Linear::new(&mut s, "head.type", d, dims.types, true, rng),
            head_target: Linear::new(&mut s, "head.target", d, dims.targets, true, rng),
        };
        Ok(Recommender { config, dims, items, store: s, layers })
    }

    /// Same architecture over a converted parameter store.
    pub fn cast<U: Float>(&self) -> Recommender<U> {
        Recommender {
            config: self.config.clone(),
            dims: self.dims,
            items: self.items.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn masking(&self) -> Masking {
        self.config.masking()
    }

    fn constant(&self, rows: usize, cols: usize, data: impl Iterator<Item = f64>) -> Tensor<T> {
        Tensor::matrix(rows, cols, data.map(T::from_f64_lossy).collect())
    }

    /// Per-step feature fusion: `[rows, D]` plus pooling weights `[rows, K]`.
    pub fn fuse(&self, g: &mut Graph<'_, T>, inp: &ModelInput) -> Result<(NodeId, Option<NodeId>)> {
        let n = inp.rows();
        let d = self.config.dim;
        let tokens: Vec<usize> = inp.ids.iter().map(|o| o.map_or(0, |i| i as usize + 1)).collect();
        let e_id = self.layers.id_emb.forward(g, &tokens)?;
        let Some(f) = &self.layers.fusion else { return Ok((e_id, None)) };
        let item = |o: &Option<u32>| o.map(|i| i as usize);
        let types: Vec<usize> = inp.ids.iter().map(|o| item(o).map_or(0, |i| self.items.type_ids[i])).collect();
        let targets: Vec<usize> = inp.ids.iter().map(|o| item(o).map_or(0, |i| self.items.target_ids[i])).collect();
        let e_type = f.type_emb.forward(g, &types)?;
        let e_target = f.target_emb.forward(g, &targets)?;
        let cont_in = g.input(self.constant(n, 2, inp.cont.iter().flat_map(|c| c.iter().copied())));
        let e_cont = f.cont.forward(g, cont_in)?;
        let dd = self.dims.desc_dim;
        let desc_in = g.input(self.constant(
            n,
            dd,
            inp.ids.iter().flat_map(|o| {
                let row = item(o);
                (0..dd).map(move |k| row.map_or(0.0, |i| self.items.desc[i * dd + k]))
            }),
        ));
        let e_desc = f.desc.forward(g, desc_in)?;
        let cat = g.concat_cols(&[e_id, e_type, e_target, e_cont, e_desc])?;
        let x = g.reshape(cat, vec![n * FEATURES, d])?;
        let xh = f.attn.forward(g, x, FEATURES, None)?;
        let q = g.param(f.query);
        let scores = g.matmul(xh, q)?;
        let scores = g.reshape(scores, vec![n, FEATURES])?;
        let alpha = g.softmax_rows(scores);
        let col = g.reshape(alpha, vec![n * FEATURES, 1])?;
        let weighted = g.mul_col(xh, col)?;
        Ok((g.sum_groups(weighted, FEATURES)?, Some(alpha)))
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, inp: &ModelInput) -> Result<Forward> {
        if inp.len > self.config.max_len {
            return Err(CoreError::Config(format!(
                "sequence length {} exceeds the maximum {}",
                inp.len, self.config.max_len
            )));
        }
        let (mut x, alpha) = self.fuse(g, inp)?;
        if !inp.masked.is_empty() {
            let m = g.param(self.layers.mask);
            x = g.replace_rows(x, &inp.masked, m)?;
        }
        if let Some(p) = &self.layers.positions {
            let pos: Vec<usize> = (0..inp.rows()).map(|r| r % inp.len).collect();
            let e = p.forward(g, &pos)?;
            x = g.add(x, e)?;
        }
        let decoder = self.config.backbone.is_decoder();
        for b in &self.layers.blocks {
            let valid = Some(inp.valid.clone());
            if decoder {
                let h = b.norm1.forward(g, x)?;
                let a = b.attn.forward(g, h, inp.len, valid)?;
                x = g.add(x, a)?;
                let h = b.norm2.forward(g, x)?;
                let f = b.ffn.forward(g, h)?;
                x = g.add(x, f)?;
            } else {
                let a = b.attn.forward(g, x, inp.len, valid)?;
                let s = g.add(x, a)?;
                x = b.norm1.forward(g, s)?;
                let f = b.ffn.forward(g, x)?;
                let s = g.add(x, f)?;
                x = b.norm2.forward(g, s)?;
            }
        }
        if let Some(n) = &self.layers.final_norm {
            x = n.forward(g, x)?;
        }
        Ok(Forward { hidden: x, alpha })
    }

    /// The three heads over the hidden states at `rows`.
    pub fn predict(&self, g: &mut Graph<'_, T>, hidden: NodeId, rows: &[usize]) -> Result<Heads> {
        let h = g.gather_rows(hidden, rows)?;
        Ok(Heads {
            cmd: self.layers.head_cmd.forward(g, h)?,
            typ: self.layers.head_type.forward(g, h)?,
            target: self.layers.head_target.forward(g, h)?,
        })
    }

    /// `focal(cmd) + γ₁·focal(type) + γ₂·focal(target)` over the labels.
    pub fn total_loss(&self, g: &mut Graph<'_, T>, heads: Heads, labels: &[u32]) -> Result<NodeId> {
        let l = &self.config.loss;
        let gamma = T::from_f64_lossy(l.gamma);
        let cmd: Vec<Option<usize>> = labels.iter().map(|&c| Some(c as usize)).collect();
        let typ: Vec<Option<usize>> = labels.iter().map(|&c| Some(self.items.type_ids[c as usize])).collect();
        let tgt: Vec<Option<usize>> = labels.iter().map(|&c| Some(self.items.target_ids[c as usize])).collect();
        let alpha: Option<Vec<T>> = l.cmd_alpha.as_ref().map(|a| a.iter().map(|&x| T::from_f64_lossy(x)).collect());
        let lc = g.focal_loss(heads.cmd, &cmd, alpha.as_deref(), gamma)?;
        let lt = g.focal_loss(heads.typ, &typ, None, gamma)?;
        let lg = g.focal_loss(heads.target, &tgt, None, gamma)?;
        let lt = g.scale(lt, T::from_f64_lossy(l.aux_type));
        let lg = g.scale(lg, T::from_f64_lossy(l.aux_target));
        let s = g.add(lc, lt)?;
        Ok(g.add(s, lg)?)
    }

    /// Forward pass plus loss over the input's labels.
    pub fn loss(&self, g: &mut Graph<'_, T>, inp: &ModelInput) -> Result<NodeId> {
        let fwd = self.forward(g, inp)?;
        let rows: Vec<usize> = inp.labels.iter().map(|l| l.0).collect();
        let labels: Vec<u32> = inp.labels.iter().map(|l| l.1).collect();
        let heads = self.predict(g, fwd.hidden, &rows)?;
        self.total_loss(g, heads, &labels)
    }

    /// Command logits at each label row of `inp`, as `f64` rows.
    pub fn command_logits(&self, inp: &ModelInput) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, inp)?;
        let rows: Vec<usize> = inp.labels.iter().map(|l| l.0).collect();
        let h = g.gather_rows(fwd.hidden, &rows)?;
        let logits = self.layers.head_cmd.forward(&mut g, h)?;
        let v = g.value(logits);
        Ok((0..v.rows()).map(|r| v.row(r).iter().map(|x| x.to_f64().unwrap()).collect()).collect())
    }

    /// Fusion pooling weights per valid row, `None` without fusion.
    pub fn fusion_weights(&self, inp: &ModelInput) -> Result<Option<Vec<[f64; FEATURES]>>> {
        let mut g = Graph::new(&self.store);
        let (_, alpha) = self.fuse(&mut g, inp)?;
        Ok(alpha.map(|a| {
            let v = g.value(a);
            (0..v.rows())
                .filter(|&r| inp.valid[r])
                .map(|r| std::array::from_fn(|k| v.at(r, k).to_f64().unwrap()))
                .collect()
        }))
    }
}
