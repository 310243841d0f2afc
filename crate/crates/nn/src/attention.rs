//! Fused scaled dot-product attention kernel.
//!
//! Rows are grouped into independent blocks of `block` consecutive rows;
//! attention never crosses a block. Queries carry `heads` heads, keys and
//! values carry `kv_heads` heads, and query head `h` reads key/value head
//! `h / (heads / kv_heads)`.

use crate::error::{shape_err, NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub block: usize,
    pub causal: bool,
    /// Per-row key mask; `false` rows are never attended to.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn validate(&self, rows: usize, q_cols: usize, kv_cols: usize) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.block == 0 {
            return Err(NnError::Config(format!(
                "degenerate attention spec {self:?}"
            )));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(NnError::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.heads, self.kv_heads
            )));
        }
        if q_cols != self.heads * self.head_dim || kv_cols != self.kv_heads * self.head_dim {
            return Err(shape_err(
                "attention",
                format!("q cols {q_cols}, kv cols {kv_cols}"),
            ));
        }
        if rows % self.block != 0 {
            return Err(shape_err(
                "attention",
                format!("{rows} rows in blocks of {}", self.block),
            ));
        }
        if let Some(m) = &self.key_valid {
            if m.len() != rows {
                return Err(shape_err(
                    "attention",
                    format!("mask len {} for {rows} rows", m.len()),
                ));
            }
        }
        Ok(())
    }

    fn span(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.block
        }
    }

    fn valid(&self, row: usize) -> bool {
        self.key_valid.as_ref().is_none_or(|m| m[row])
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Returns the output `[rows, heads·head_dim]` and the probabilities
/// `[rows, heads, block]`.
pub fn forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
) -> Result<(Tensor<T>, Vec<T>)> {
    let rows = q.rows();
    if k.rows() != rows || v.rows() != rows || k.cols() != v.cols() {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    spec.validate(rows, q.cols(), k.cols())?;
    let (h_n, d, blk) = (spec.heads, spec.head_dim, spec.block);
    let group = h_n / spec.kv_heads;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut out = Tensor::zeros(vec![rows, h_n * d]);
    let mut probs = vec![T::zero(); rows * h_n * blk];
    let mut scores = vec![T::zero(); blk];
    for b0 in (0..rows).step_by(blk) {
        for i in 0..blk {
            let r = b0 + i;
            for h in 0..h_n {
                let kh = h / group;
                let qh = &q.row(r)[h * d..(h + 1) * d];
                let mut max = T::neg_infinity();
                for j in 0..spec.span(i) {
                    if !spec.valid(b0 + j) {
                        continue;
                    }
                    let s = dot(qh, &k.row(b0 + j)[kh * d..(kh + 1) * d]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                let p = &mut probs[(r * h_n + h) * blk..(r * h_n + h + 1) * blk];
                for j in 0..spec.span(i) {
                    if spec.valid(b0 + j) {
                        p[j] = (scores[j] - max).exp();
                        sum += p[j];
                    }
                }
                let o = &mut out.row_mut(r)[h * d..(h + 1) * d];
                for j in 0..spec.span(i) {
                    if !spec.valid(b0 + j) {
                        continue;
                    }
                    p[j] /= sum;
                    let vj = &v.row(b0 + j)[kh * d..(kh + 1) * d];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

pub fn backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let rows = q.rows();
    let (h_n, d, blk) = (spec.heads, spec.head_dim, spec.block);
    let group = h_n / spec.kv_heads;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut dp = vec![T::zero(); blk];
    for b0 in (0..rows).step_by(blk) {
        for i in 0..blk {
            let r = b0 + i;
            for h in 0..h_n {
                let kh = h / group;
                let p = &probs[(r * h_n + h) * blk..(r * h_n + h + 1) * blk];
                let go = &g.row(r)[h * d..(h + 1) * d];
                let mut weighted = T::zero();
                for j in 0..spec.span(i) {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(go, &v.row(b0 + j)[kh * d..(kh + 1) * d]);
                    weighted += p[j] * dp[j];
                    for (dvc, &gc) in dv.row_mut(b0 + j)[kh * d..(kh + 1) * d].iter_mut().zip(go) {
                        *dvc += p[j] * gc;
                    }
                }
                for j in 0..spec.span(i) {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kj = &k.row(b0 + j)[kh * d..(kh + 1) * d];
                    for (dqc, &kc) in dq.row_mut(r)[h * d..(h + 1) * d].iter_mut().zip(kj) {
                        *dqc += ds * kc;
                    }
                    let qi = &q.row(r)[h * d..(h + 1) * d];
                    for (dkc, &qc) in dk.row_mut(b0 + j)[kh * d..(kh + 1) * d].iter_mut().zip(qi) {
                        *dkc += ds * qc;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
