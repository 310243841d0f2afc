//! Parameterized building blocks. Layers hold only parameter handles, so the
//! same layer object works with any [`Graph`] over its [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionSpec;
use crate::error::{shape_err, NnError, Result};
use crate::float::Float;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn xavier<T: Float, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(vec![fan_in, fan_out], std, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(inputs, outputs, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![1, outputs])));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            Tensor::randn(vec![rows, dim], 0.02, rng),
        );
        Embedding { table, rows, dim }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<NodeId> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: ParamId,
    pub bias: Option<ParamId>,
}

impl Norm {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: NormKind,
        dim: usize,
    ) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![1, dim], T::one()));
        let bias = (kind == NormKind::LayerNorm)
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![1, dim])));
        Norm { kind, gain, bias }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let eps = T::from_f64_lossy(NORM_EPS);
        let gain = g.param(self.gain);
        match (self.kind, self.bias) {
            (NormKind::LayerNorm, Some(b)) => {
                let b = g.param(b);
                g.layer_norm(x, gain, b, eps)
            }
            _ => g.rms_norm(x, gain, eps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    GeluMlp,
    SwigluMlp,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub kind: FfnKind,
    up: Linear,
    gate: Option<Linear>,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: FfnKind,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng);
        let gate = (kind == FfnKind::SwigluMlp)
            .then(|| Linear::new(store, &format!("{name}.gate"), dim, hidden, true, rng));
        let down = Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng);
        FeedForward {
            kind,
            up,
            gate,
            down,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let a = self.up.forward(g, x)?;
        let h = match &self.gate {
            Some(gate) => {
                let b = gate.forward(g, x)?;
                let s = g.silu(b);
                g.mul(a, s)?
            }
            None => g.gelu(a),
        };
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
}

impl MoeConfig {
    pub fn new(hidden: usize) -> Self {
        MoeConfig {
            num_experts: 8,
            top_k: 2,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(NnError::Config(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Sparse mixture of SwiGLU experts behind a linear top-k router.
#[derive(Debug, Clone)]
pub struct MoeFeedForward {
    pub config: MoeConfig,
    pub router: Linear,
    pub experts: Vec<FeedForward>,
}

impl MoeFeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        config: MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let router = Linear::new(
            store,
            &format!("{name}.router"),
            dim,
            config.num_experts,
            false,
            rng,
        );
        let experts = (0..config.num_experts)
            .map(|e| {
                FeedForward::new(
                    store,
                    &format!("{name}.expert{e}"),
                    FfnKind::SwigluMlp,
                    dim,
                    config.hidden,
                    rng,
                )
            })
            .collect();
        Ok(MoeFeedForward {
            config,
            router,
            experts,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let logits = self.router.forward(g, x)?;
        self.forward_with_logits(g, x, logits)
    }

    /// Routes with externally supplied router logits `[tokens, experts]`.
    pub fn forward_with_logits<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        logits: NodeId,
    ) -> Result<NodeId> {
        let tokens = g.value(x).rows();
        if tokens == 0 {
            return Err(shape_err("moe", "no tokens"));
        }
        let (gate, selected) = g.top_k_gate(logits, self.config.top_k)?;
        let mut total: Option<NodeId> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..tokens).filter(|&t| selected[t].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &rows)?;
            let ye = expert.forward(g, xe)?;
            let col = g.slice_cols(gate, e, 1)?;
            let we = g.gather_rows(col, &rows)?;
            let weighted = g.mul_col(ye, we)?;
            let placed = g.scatter_add_rows(weighted, &rows, tokens)?;
            total = Some(match total {
                Some(t) => g.add(t, placed)?,
                None => placed,
            });
        }
        Ok(total.expect("every token selects at least one expert"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Number of key/value heads; equal to `num_heads` for plain multi-head attention.
    pub kv_groups: usize,
    pub causal: bool,
    pub rope: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(NnError::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.kv_groups == 0 || self.num_heads % self.kv_groups != 0 {
            return Err(NnError::Config(format!(
                "{} heads not divisible by {} kv groups",
                self.num_heads, self.kv_groups
            )));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(NnError::Config(format!(
                "rope needs an even head_dim, got {}",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let kv = config.kv_groups * config.head_dim();
        Ok(MultiHeadAttention {
            config,
            wq: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, kv, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, kv, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
        })
    }

    /// Self-attention over `x` `[n·block, D]`, split into independent
    /// sequences of `block` rows. Position of row `r` is `r % block`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        block: usize,
        key_valid: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        self.forward_qkv(g, x, x, x, block, key_valid)
    }

    pub fn forward_qkv<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        block: usize,
        key_valid: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let c = self.config;
        let mut q = self.wq.forward(g, q_in)?;
        let mut k = self.wk.forward(g, k_in)?;
        let v = self.wv.forward(g, v_in)?;
        if c.rope {
            let rows = g.value(q).rows();
            let positions: Vec<usize> = (0..rows).map(|r| r % block.max(1)).collect();
            q = g.rope(q, &positions, c.head_dim(), ROPE_BASE)?;
            k = g.rope(k, &positions, c.head_dim(), ROPE_BASE)?;
        }
        let spec = AttentionSpec {
            heads: c.num_heads,
            kv_heads: c.kv_groups,
            head_dim: c.head_dim(),
            block,
            causal: c.causal,
            key_valid,
        };
        let att = g.attention(q, k, v, spec)?;
        self.wo.forward(g, att)
    }
}
