//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] only has to walk it in reverse.

use crate::attention::{self, AttentionSpec};
use crate::error::{shape_err, NnError, Result};
use crate::float::{gemm, Float};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    MulCol {
        a: NodeId,
        col: NodeId,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    Gelu {
        a: NodeId,
    },
    Silu {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv: Vec<T>,
    },
    Gather {
        x: NodeId,
        ids: Vec<usize>,
    },
    ScatterAdd {
        x: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Rope {
        x: NodeId,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    TopKGate {
        logits: NodeId,
        selected: Vec<Vec<usize>>,
    },
    Focal {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        alpha: Option<Vec<T>>,
        gamma: T,
        probs: Vec<T>,
    },
    SumGroups {
        x: NodeId,
        group: usize,
    },
    ReplaceRows {
        x: NodeId,
        rows: Vec<usize>,
        repl: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], kept for parameters and for
/// leaves created with [`Graph::input_with_grad`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    /// Squared L2 norm over all parameter gradients.
    pub fn global_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum()
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.iter().product::<usize>() != b.iter().product::<usize>() || a.last() != b.last() {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation of GELU; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let du = c * (T::one() + three * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (value, deriv)
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is reported by [`Gradients::node`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = self.params.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            trans_b,
            &mut out,
            T::zero(),
        );
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    fn zip(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av.shape(), bv.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_vec(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }, &[a, row]))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.len() != av.rows() {
            return Err(shape_err(
                "mul_col",
                format!("{:?} * {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol { a, col }, &[a, col]))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_parts(x).0).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::Gelu { a }, &[a])
    }

    /// `x · sigmoid(x)`, the swish used by SwiGLU.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::Silu { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("features {n}, gain {:?}", gv.shape()),
            ));
        }
        let rows = xv.rows();
        let nf = T::from_usize(n).unwrap();
        let mut out = xv.clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let n = xv.cols();
        if gv.len() != n {
            return Err(shape_err(
                "rms_norm",
                format!("features {n}, gain {:?}", gv.shape()),
            ));
        }
        let nf = T::from_usize(n).unwrap();
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let iv = T::one() / (ms + eps).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = row[j] * iv * gv.data()[j];
            }
            inv.push(iv);
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    /// Selects rows `ids` of `x` (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(ids.len(), n, data);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverse of [`Self::gather_rows`]: `out[ids[i]] += x[i]`, `out` has `rows` rows.
    pub fn scatter_add_rows(&mut self, x: NodeId, ids: &[usize], rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != ids.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{} rows, {} ids", xv.rows(), ids.len()),
            ));
        }
        let n = xv.cols();
        let mut out = Tensor::zeros(vec![rows, n]);
        for (i, &dst) in ids.iter().enumerate() {
            if dst >= rows {
                return Err(shape_err(
                    "scatter_add_rows",
                    format!("row {dst} of {rows}"),
                ));
            }
            for (o, &v) in out.row_mut(dst).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterAdd {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", xv.shape()),
            ));
        }
        let out = xv.clone().reshaped(shape);
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows { x }, &[x])
    }

    /// Rotary position embedding over every `head_dim`-wide head of each row.
    /// Row `r` is rotated for position `positions[r]`.
    pub fn rope(
        &mut self,
        x: NodeId,
        positions: &[usize],
        head_dim: usize,
        base: f64,
    ) -> Result<NodeId> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(NnError::Config(format!(
                "rope needs an even head_dim, got {head_dim}"
            )));
        }
        let xv = self.value(x);
        if xv.cols() % head_dim != 0 || positions.len() != xv.rows() {
            return Err(shape_err(
                "rope",
                format!(
                    "{:?} with head_dim {head_dim} and {} positions",
                    xv.shape(),
                    positions.len()
                ),
            ));
        }
        let mut out = xv.clone();
        for (r, &pos) in positions.iter().enumerate() {
            rotate_row(out.row_mut(r), pos, head_dim, base, false);
        }
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            &[x],
        ))
    }

    /// Sparse router gate: per row keeps the `k` largest logits (ties to the
    /// lower index) and renormalizes them with a softmax; other entries are 0.
    /// Returns the gate node and the selected expert indices per row.
    pub fn top_k_gate(&mut self, logits: NodeId, k: usize) -> Result<(NodeId, Vec<Vec<usize>>)> {
        let lv = self.value(logits);
        let e = lv.cols();
        if k == 0 || k > e {
            return Err(NnError::Config(format!("top_k {k} with {e} experts")));
        }
        let mut out = Tensor::zeros(lv.shape().to_vec());
        let mut selected = Vec::with_capacity(lv.rows());
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let mut order: Vec<usize> = (0..e).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order.truncate(k);
            let mut w: Vec<T> = order.iter().map(|&i| row[i]).collect();
            softmax_in_place(&mut w);
            let orow = out.row_mut(r);
            for (&i, &wi) in order.iter().zip(&w) {
                orow[i] = wi;
            }
            selected.push(order);
        }
        let id = self.push(
            out,
            Op::TopKGate {
                logits,
                selected: selected.clone(),
            },
            &[logits],
        );
        Ok((id, selected))
    }

    /// Mean focal loss `−α_t (1 − p_t)^γ ln p_t` over rows with a target.
    /// With `gamma = 0` and no `alpha` this is plain cross-entropy.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        alpha: Option<&[T]>,
        gamma: T,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.cols();
        if targets.len() != lv.rows() {
            return Err(shape_err(
                "focal_loss",
                format!("{} rows, {} targets", lv.rows(), targets.len()),
            ));
        }
        if let Some(a) = alpha {
            if a.len() != c {
                return Err(shape_err(
                    "focal_loss",
                    format!("alpha len {} vs {c} classes", a.len()),
                ));
            }
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            if let Some(t) = *t {
                if t >= c {
                    return Err(NnError::TargetOutOfRange {
                        target: t,
                        classes: c,
                    });
                }
                let logp = log_softmax_at(row, t);
                let pt = p[t];
                let a = alpha.map_or(T::one(), |a| a[t]);
                total += -a * modulating(pt, gamma) * logp;
                count += 1;
            }
            probs.extend(p);
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let op = Op::Focal {
            logits,
            targets: targets.to_vec(),
            alpha: alpha.map(|a| a.to_vec()),
            gamma,
            probs,
        };
        Ok(self.push(Tensor::scalar(value), op, &[logits]))
    }

    /// Sums consecutive groups of `group` rows: `[n·group, d] → [n, d]`.
    pub fn sum_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(shape_err(
                "sum_groups",
                format!("{} rows in groups of {group}", xv.rows()),
            ));
        }
        let n = xv.rows() / group;
        let d = xv.cols();
        let mut out = Tensor::zeros(vec![n, d]);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            for (o, &v) in out.row_mut(r / group).iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SumGroups { x, group }, &[x]))
    }

    /// Replaces the listed rows of `x` with the single row `repl`.
    pub fn replace_rows(&mut self, x: NodeId, rows: &[usize], repl: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(repl));
        if rv.len() != xv.cols() {
            return Err(shape_err(
                "replace_rows",
                format!("{:?} into {:?}", rv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for &r in rows {
            if r >= out.rows() {
                return Err(shape_err(
                    "replace_rows",
                    format!("row {r} of {}", out.rows()),
                ));
            }
            out.row_mut(r).copy_from_slice(rv.data());
        }
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                rows: rows.to_vec(),
                repl,
            },
            &[x, repl],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::from_usize(xv.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Scaled dot-product attention over already-projected heads.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
    ) -> Result<NodeId> {
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), &spec)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Saved attention probabilities `[rows, heads, block]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.push((NodeId(i), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut params: Vec<Option<Tensor<T>>> =
            (0..self.param_nodes.len()).map(|_| None).collect();
        let mut rest = Vec::new();
        for (id, g) in leaves {
            match self.param_nodes.iter().position(|p| *p == Some(id)) {
                Some(pi) => params[pi] = Some(g),
                None => rest.push((id, g)),
            }
        }
        Ok(Gradients {
            params,
            leaves: rest,
        })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(g.reshaped(shape));
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · op(B)ᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        !*trans_b,
                        &mut da,
                        T::zero(),
                    );
                    self.acc(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.needs(*b) {
                    if *trans_b {
                        let mut db = vec![T::zero(); n * k];
                        gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            true,
                            av.data(),
                            false,
                            &mut db,
                            T::zero(),
                        );
                        self.acc(grads, *b, Tensor::matrix(n, k, db));
                    } else {
                        let mut db = vec![T::zero(); k * n];
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            true,
                            g.data(),
                            false,
                            &mut db,
                            T::zero(),
                        );
                        self.acc(grads, *b, Tensor::matrix(k, n, db));
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                if self.needs(*b) {
                    let neg = g.data().iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape().to_vec(), neg));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *a, Tensor::from_vec(g.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape().to_vec(), d));
                }
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *row, |d| {
                    for r in 0..g.rows() {
                        for (acc, &v) in d.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::MulCol { a, col } => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.needs(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = cv.data()[r];
                        for v in d.row_mut(r) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *a, d);
                }
                self.acc_with(grads, *col, |d| {
                    for (r, dr) in d.iter_mut().enumerate() {
                        *dr += g
                            .row(r)
                            .iter()
                            .zip(av.row(r))
                            .map(|(&x, &y)| x * y)
                            .sum::<T>();
                    }
                });
            }
            Op::Scale { a, c } => {
                let d = g.data().iter().map(|&v| v * *c).collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape().to_vec(), d));
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv * gelu_parts(x).1)
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape().to_vec(), d));
            }
            Op::Silu { a } => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols();
                let nf = T::from_usize(n).unwrap();
                let xhat = |r: usize, j: usize| (xv.row(r)[j] - mean[r]) * rstd[r];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for r in 0..xv.rows() {
                        let gr = g.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dxh = gr[j] * gv.data()[j];
                            m1 += dxh;
                            m2 += dxh * xhat(r, j);
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxh = gr[j] * gv.data()[j];
                            *o = rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *gain, |d| {
                    for r in 0..xv.rows() {
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj += g.row(r)[j] * xhat(r, j);
                        }
                    }
                });
                self.acc_with(grads, *bias, |d| {
                    for r in 0..xv.rows() {
                        for (dj, &v) in d.iter_mut().zip(g.row(r)) {
                            *dj += v;
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols();
                let nf = T::from_usize(n).unwrap();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for r in 0..xv.rows() {
                        let (gr, xr) = (g.row(r), xv.row(r));
                        let mut m2 = T::zero();
                        for j in 0..n {
                            m2 += gr[j] * gv.data()[j] * xr[j] * inv[r];
                        }
                        m2 /= nf;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxh = gr[j] * gv.data()[j];
                            *o = inv[r] * (dxh - xr[j] * inv[r] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *gain, |d| {
                    for r in 0..xv.rows() {
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj += g.row(r)[j] * xv.row(r)[j] * inv[r];
                        }
                    }
                });
            }
            Op::Gather { x, ids } => {
                let n = g.cols();
                self.acc_with(grads, *x, |d| {
                    for (i, &src) in ids.iter().enumerate() {
                        for (dj, &v) in d[src * n..(src + 1) * n].iter_mut().zip(g.row(i)) {
                            *dj += v;
                        }
                    }
                });
            }
            Op::ScatterAdd { x, ids } => {
                let n = g.cols();
                self.acc_with(grads, *x, |d| {
                    for (i, &dst) in ids.iter().enumerate() {
                        for (dj, &v) in d[i * n..(i + 1) * n].iter_mut().zip(g.row(dst)) {
                            *dj += v;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let width = self.value(*x).cols();
                let len = g.cols();
                self.acc_with(grads, *x, |d| {
                    for r in 0..g.rows() {
                        for (dj, &v) in d[r * width + start..r * width + start + len]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *dj += v;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, *p, Tensor::matrix(g.rows(), w, data));
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshaped(shape));
            }
            Op::SoftmaxRows { x } => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let y = out.row(r);
                    let dot = g.row(r).iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = y[j] * (*v - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let mut d = g.clone();
                for (r, &pos) in positions.iter().enumerate() {
                    rotate_row(d.row_mut(r), pos, *head_dim, *base, true);
                }
                self.acc(grads, *x, d);
            }
            Op::TopKGate { logits, selected } => {
                let e = out.cols();
                self.acc_with(grads, *logits, |d| {
                    for (r, sel) in selected.iter().enumerate() {
                        let w = out.row(r);
                        let gr = g.row(r);
                        let dot = sel.iter().map(|&i| w[i] * gr[i]).sum::<T>();
                        for &i in sel {
                            d[r * e + i] += w[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = g.item() / T::from_usize(count).unwrap();
                let lv = self.value(*logits);
                self.acc_with(grads, *logits, |d| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = &probs[r * c..(r + 1) * c];
                        let pt = p[t];
                        let a = alpha.as_ref().map_or(T::one(), |a| a[t]);
                        let logp = log_softmax_at(lv.row(r), t);
                        // dL/dp_t, then chain through dp_t/dz_j = p_t(δ_jt − p_j)
                        let one_minus = T::one() - pt;
                        let mut dldp = -modulating(pt, *gamma) / pt;
                        if *gamma != T::zero() && one_minus > T::zero() {
                            dldp += *gamma * one_minus.powf(*gamma - T::one()) * logp;
                        }
                        dldp *= a;
                        if *gamma == T::zero() {
                            // exact CE gradient, avoids 1/p_t cancellation
                            for j in 0..c {
                                let delta = if j == t { T::one() } else { T::zero() };
                                d[r * c + j] += scale * a * (p[j] - delta);
                            }
                        } else {
                            for j in 0..c {
                                let delta = if j == t { T::one() } else { T::zero() };
                                d[r * c + j] += scale * dldp * pt * (delta - p[j]);
                            }
                        }
                    }
                });
            }
            Op::SumGroups { x, group } => {
                let n = g.cols();
                self.acc_with(grads, *x, |d| {
                    for (r, chunk) in d.chunks_mut(n).enumerate() {
                        for (dj, &v) in chunk.iter_mut().zip(g.row(r / group)) {
                            *dj += v;
                        }
                    }
                });
            }
            Op::ReplaceRows { x, rows, repl } => {
                if self.needs(*x) {
                    let mut d = g.clone();
                    for &r in rows {
                        d.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                    }
                    self.acc(grads, *x, d);
                }
                self.acc_with(grads, *repl, |d| {
                    for &r in rows {
                        for (dj, &v) in d.iter_mut().zip(g.row(r)) {
                            *dj += v;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let s = g.item() / T::from_usize(xv.len().max(1)).unwrap();
                self.acc(grads, *x, Tensor::full(xv.shape().to_vec(), s));
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (dq, dk, dv) = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    spec,
                    probs,
                    g,
                );
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
        }
    }
}

/// `(1 − p)^γ`, with `0^0 = 1`.
fn modulating<T: Float>(p: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        (T::one() - p).max(T::zero()).powf(gamma)
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_at<T: Float>(row: &[T], t: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[t] - lse
}

fn rotate_row<T: Float>(row: &mut [T], pos: usize, head_dim: usize, base: f64, inverse: bool) {
    if pos == 0 {
        return;
    }
    let half = head_dim / 2;
    for head in row.chunks_mut(head_dim) {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (
                T::from_f64_lossy(if inverse { -s } else { s }),
                T::from_f64_lossy(c),
            );
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}
