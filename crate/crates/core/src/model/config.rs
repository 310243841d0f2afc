use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    EncoderOnly,
    DecoderOnly,
    DecoderMoe,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::EncoderOnly, BackboneKind::DecoderOnly, BackboneKind::DecoderMoe];

    pub fn masking(self) -> Masking {
        match self {
            BackboneKind::EncoderOnly => Masking::Mlm,
            _ => Masking::Clm,
        }
    }

    pub fn is_decoder(self) -> bool {
        self != BackboneKind::EncoderOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::EncoderOnly => "encoder_only",
            BackboneKind::DecoderOnly => "decoder_only",
            BackboneKind::DecoderMoe => "decoder_moe",
        }
    }
}

impl FromStr for BackboneKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| CoreError::Config(format!("unknown backbone `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    Clm,
    Mlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focusing parameter shared by the three tasks.
    pub gamma: f64,
    pub aux_type: f64,
    pub aux_target: f64,
    /// Per-command focal weights; uniform when absent.
    pub cmd_alpha: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, aux_type: 0.2, aux_target: 0.2, cmd_alpha: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Key/value heads of decoder attention; the encoder always uses `heads`.
    pub kv_groups: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    /// Attention fusion over all item features; `false` embeds the id only.
    pub fusion: bool,
    pub fusion_heads: usize,
    pub mlm_ratio: f64,
    /// Causal training predicts only the final position.
    pub final_only: bool,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::DecoderOnly,
            layers: 2,
            dim: 32,
            heads: 4,
            kv_groups: 2,
            ffn_hidden: 64,
            max_len: 110,
            fusion: true,
            fusion_heads: 2,
            mlm_ratio: 0.15,
            final_only: false,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn masking(&self) -> Masking {
        self.backbone.masking()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.layers == 0 {
            return bad("a backbone needs at least one block".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.kv_groups == 0 || self.heads % self.kv_groups != 0 {
            return bad(format!("{} heads not divisible by {} kv groups", self.heads, self.kv_groups));
        }
        if self.backbone.is_decoder() && (self.dim / self.heads) % 2 != 0 {
            return bad("rotary embeddings need an even head dim".into());
        }
        if self.fusion && (self.fusion_heads == 0 || self.dim % self.fusion_heads != 0) {
            return bad(format!("dim {} not divisible by {} fusion heads", self.dim, self.fusion_heads));
        }
        if !(self.mlm_ratio > 0.0 && self.mlm_ratio < 1.0) || self.max_len < 2 {
            return bad("mlm_ratio must lie in (0, 1) and max_len be at least 2".into());
        }
        let l = &self.loss;
        if l.gamma < 0.0 || l.aux_type < 0.0 || l.aux_target < 0.0 {
            return bad("loss weights and gamma must be non-negative".into());
        }
        if l.cmd_alpha.as_ref().is_some_and(|a| a.iter().any(|&x| x <= 0.0)) {
            return bad("focal alpha values must be positive".into());
        }
        Ok(())
    }
}
