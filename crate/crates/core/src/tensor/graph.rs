//! Reverse-mode autodiff over a single-owner tape of primitive applications.
//!
//! A [`Graph`] records every primitive applied to tensors that require
//! gradients. [`Graph::backward`] consumes the graph and visits each node
//! exactly once in reverse topological (= insertion) order. Every primitive
//! checks its output for non-finite values and fails fast instead of letting
//! a NaN propagate into the optimizer.

use super::scalar::Scalar;
use super::{matmul_into, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: E },
    AddRowBroadcast { x: Var, bias: Var },
    Transpose { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu { x: Var },
    GatherRows { x: Var, indices: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MaskedFillCols { x: Var, mask: Vec<bool> },
    ReduceMean { x: Var },
    ReduceSum { x: Var },
    Log { x: Var },
    Exp { x: Var },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<u32> },
    MultiHeadAttention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, masks: Vec<Vec<bool>> },
}

enum Aux<E: Scalar> {
    None,
    /// Saved normalized activations and per-row 1/std for layer-norm backward.
    LayerNorm { xhat: Tensor<E>, inv_std: Vec<E> },
    /// Saved softmax probabilities for cross-entropy backward.
    Probs(Tensor<E>),
    /// Attention probabilities, laid out `[batch][head][query][key]`.
    AttnProbs(Vec<E>),
}

struct Node<E: Scalar> {
    op: Op<E>,
    value: Tensor<E>,
    needs_grad: bool,
    aux: Aux<E>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tape of primitive applications with saved activations for backward.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// Inference-mode graph: nothing requires grad, backward is unavailable.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, node: Node<E>) -> Result<Var, TensorError> {
        if !node.value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let needs_grad = self.grad_enabled && requires_grad;
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad, aux: Aux::None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with logical transposes applied through strides.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, TensorError> {
        let (ar, ac) = self.val(a).shape();
        let (br, bc) = self.val(b).shape();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{ar}x{ac} (ta={ta}) with {br}x{bc} (tb={tb})"),
            });
        }
        let mut out = Tensor::zeros(m, n);
        matmul_into(&mut out, self.val(a), ta, self.val(b), tb, E::ONE, E::ZERO);
        let needs_grad = self.needs(a) || self.needs(b);
        self.push("matmul", Node { op: Op::MatMul { a, b, ta, tb }, value: out, needs_grad, aux: Aux::None })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} with {:?}", self.val(a).shape(), self.val(b).shape()),
            });
        }
        let mut out = self.val(a).clone();
        out.add_assign(self.val(b));
        let needs_grad = self.needs(a) || self.needs(b);
        self.push("add", Node { op: Op::Add { a, b }, value: out, needs_grad, aux: Aux::None })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} with {:?}", self.val(a).shape(), self.val(b).shape()),
            });
        }
        let (r, c) = self.val(a).shape();
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs_grad = self.needs(a) || self.needs(b);
        self.push("mul", Node { op: Op::Mul { a, b }, value: Tensor::from_vec(r, c, data), needs_grad, aux: Aux::None })
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var, TensorError> {
        let mut out = self.val(x).clone();
        out.scale_assign(c);
        let needs_grad = self.needs(x);
        self.push("scale", Node { op: Op::Scale { x, c }, value: out, needs_grad, aux: Aux::None })
    }

    /// `y[r, :] = x[r, :] + bias[0, :]` for every row r.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, c) = self.val(x).shape();
        let (br, bc) = self.val(bias).shape();
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("bias {br}x{bc} against {c} columns"),
            });
        }
        let mut out = self.val(x).clone();
        let bias_row: Vec<E> = self.val(bias).data().to_vec();
        for row in 0..out.rows() {
            let base = row * c;
            for j in 0..c {
                out.data_mut()[base + j] += bias_row[j];
            }
        }
        let needs_grad = self.needs(x) || self.needs(bias);
        self.push(
            "add_row_broadcast",
            Node { op: Op::AddRowBroadcast { x, bias }, value: out, needs_grad, aux: Aux::None },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, self.val(x).get(i, j));
            }
        }
        let needs_grad = self.needs(x);
        self.push("transpose", Node { op: Op::Transpose { x }, value: out, needs_grad, aux: Aux::None })
    }

    /// Row-wise softmax (over the last axis).
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if c == 0 {
            return Err(TensorError::Invalid { op: "softmax", detail: "zero columns".into() });
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.val(x).row(i);
            let m = row.iter().copied().fold(row[0], E::maximum);
            let mut denom = E::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..c {
                let v = out.get(i, j) / denom;
                out.set(i, j, v);
            }
        }
        let needs_grad = self.needs(x);
        self.push("softmax", Node { op: Op::Softmax { x }, value: out, needs_grad, aux: Aux::None })
    }

    /// Row-wise log-softmax, numerically stable via max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if c == 0 {
            return Err(TensorError::Invalid { op: "log_softmax", detail: "zero columns".into() });
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.val(x).row(i);
            let m = row.iter().copied().fold(row[0], E::maximum);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln();
            for j in 0..c {
                out.set(i, j, row[j] - lse);
            }
        }
        let needs_grad = self.needs(x);
        self.push("log_softmax", Node { op: Op::LogSoftmax { x }, value: out, needs_grad, aux: Aux::None })
    }

    /// Row-wise layer normalization with learned gain/bias (`1 x cols` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if self.val(gain).shape() != (1, c) || self.val(bias).shape() != (1, c) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} against {c} columns",
                    self.val(gain).shape(),
                    self.val(bias).shape()
                ),
            });
        }
        let eps = E::from_f64(eps);
        let n = E::from_f64(c as f64);
        let mut xhat = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.val(x).row(i);
            let mean = row.iter().copied().sum::<E>() / n;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..c {
                let h = (row[j] - mean) * istd;
                xhat.set(i, j, h);
                out.set(i, j, self.val(gain).get(0, j) * h + self.val(bias).get(0, j));
            }
        }
        let needs_grad = self.needs(x) || self.needs(gain) || self.needs(bias);
        let aux = if needs_grad { Aux::LayerNorm { xhat, inv_std } } else { Aux::None };
        self.push("layer_norm", Node { op: Op::LayerNorm { x, gain, bias }, value: out, needs_grad, aux })
    }

    /// tanh-approximate GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        let cc = E::from_f64(GELU_C);
        let k = E::from_f64(GELU_K);
        let half = E::from_f64(0.5);
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| {
                let u = cc * (v + k * v * v * v);
                half * v * (E::ONE + u.tanh())
            })
            .collect();
        let needs_grad = self.needs(x);
        self.push("gelu", Node { op: Op::Gelu { x }, value: Tensor::from_vec(r, c, data), needs_grad, aux: Aux::None })
    }

    /// `y[i, :] = x[indices[i], :]` — embedding lookup and general row gather.
    pub fn gather_rows(&mut self, x: Var, indices: &[u32]) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        for &ix in indices {
            if ix as usize >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    detail: format!("index {ix} out of range for {r} rows"),
                });
            }
        }
        let mut out = Tensor::zeros(indices.len(), c);
        for (i, &ix) in indices.iter().enumerate() {
            let src = self.val(x).row(ix as usize).to_vec();
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src);
        }
        let needs_grad = self.needs(x);
        self.push(
            "gather_rows",
            Node { op: Op::GatherRows { x, indices: indices.to_vec() }, value: out, needs_grad, aux: Aux::None },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_rows", detail: "no parts".into() });
        }
        let c = self.val(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.val(p).cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("{} columns with {} columns", c, self.val(p).cols()),
                });
            }
            rows += self.val(p).rows();
        }
        let mut out = Tensor::zeros(rows, c);
        let mut at = 0;
        for &p in parts {
            let pr = self.val(p).rows();
            let src = self.val(p).data().to_vec();
            out.data_mut()[at * c..(at + pr) * c].copy_from_slice(&src);
            at += pr;
        }
        let needs_grad = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Node { op: Op::ConcatRows { parts: parts.to_vec() }, value: out, needs_grad, aux: Aux::None })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_cols", detail: "no parts".into() });
        }
        let r = self.val(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.val(p).rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{} rows with {} rows", r, self.val(p).rows()),
                });
            }
            cols += self.val(p).cols();
        }
        let mut out = Tensor::zeros(r, cols);
        let mut at = 0;
        for &p in parts {
            let pc = self.val(p).cols();
            for i in 0..r {
                let src = self.val(p).row(i).to_vec();
                out.data_mut()[i * cols + at..i * cols + at + pc].copy_from_slice(&src);
            }
            at += pc;
        }
        let needs_grad = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Node { op: Op::ConcatCols { parts: parts.to_vec() }, value: out, needs_grad, aux: Aux::None })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if start + len > r {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let data = self.val(x).data()[start * c..(start + len) * c].to_vec();
        let needs_grad = self.needs(x);
        self.push(
            "slice_rows",
            Node { op: Op::SliceRows { x, start }, value: Tensor::from_vec(len, c, data), needs_grad, aux: Aux::None },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {c}", start + len),
            });
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            let src = &self.val(x).row(i)[start..start + len];
            let dst_range = i * len..(i + 1) * len;
            out.data_mut()[dst_range].copy_from_slice(src);
        }
        let needs_grad = self.needs(x);
        self.push("slice_cols", Node { op: Op::SliceCols { x, start }, value: out, needs_grad, aux: Aux::None })
    }

    /// Replaces every element of each masked column with `value`.
    pub fn masked_fill_cols(&mut self, x: Var, mask: &[bool], value: E) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        if mask.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask of {} entries against {c} columns", mask.len()),
            });
        }
        let mut out = self.val(x).clone();
        for i in 0..r {
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    out.set(i, j, value);
                }
            }
        }
        let needs_grad = self.needs(x);
        self.push(
            "masked_fill",
            Node { op: Op::MaskedFillCols { x, mask: mask.to_vec() }, value: out, needs_grad, aux: Aux::None },
        )
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.val(x).len();
        if n == 0 {
            return Err(TensorError::Invalid { op: "reduce_mean", detail: "empty tensor".into() });
        }
        let s = self.val(x).data().iter().copied().sum::<E>() / E::from_f64(n as f64);
        let needs_grad = self.needs(x);
        self.push("reduce_mean", Node { op: Op::ReduceMean { x }, value: Tensor::scalar(s), needs_grad, aux: Aux::None })
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.val(x).data().iter().copied().sum::<E>();
        let needs_grad = self.needs(x);
        self.push("reduce_sum", Node { op: Op::ReduceSum { x }, value: Tensor::scalar(s), needs_grad, aux: Aux::None })
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        let data = self.val(x).data().iter().map(|&v| v.ln()).collect();
        let needs_grad = self.needs(x);
        self.push("log", Node { op: Op::Log { x }, value: Tensor::from_vec(r, c, data), needs_grad, aux: Aux::None })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.val(x).shape();
        let data = self.val(x).data().iter().map(|&v| v.exp()).collect();
        let needs_grad = self.needs(x);
        self.push("exp", Node { op: Op::Exp { x }, value: Tensor::from_vec(r, c, data), needs_grad, aux: Aux::None })
    }

    /// Fused scaled-dot-product multi-head attention over a batch of
    /// equal-length sequences stacked as `(batch * seq_len) x hidden`.
    ///
    /// `masks[b][j] = true` hides key position j of sequence b from every
    /// query. Equivalent to the composed slice/matmul/masked-fill/softmax/
    /// concat pipeline, fused into one node for the training hot path.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        masks: &[Vec<bool>],
    ) -> Result<Var, TensorError> {
        let (rows, hidden) = self.val(q).shape();
        if self.val(k).shape() != (rows, hidden) || self.val(v).shape() != (rows, hidden) {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.val(q).shape(),
                    self.val(k).shape(),
                    self.val(v).shape()
                ),
            });
        }
        if heads == 0 || hidden % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::Invalid {
                op: "multi_head_attention",
                detail: format!("rows {rows}, hidden {hidden}, heads {heads}, seq_len {seq_len}"),
            });
        }
        let batch = rows / seq_len;
        if masks.len() != batch || masks.iter().any(|m| m.len() != seq_len) {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("{} masks for batch {batch} x {seq_len}", masks.len()),
            });
        }
        for mask in masks {
            if mask.iter().all(|&m| m) {
                return Err(TensorError::Invalid {
                    op: "multi_head_attention",
                    detail: "a sequence has no visible key positions".into(),
                });
            }
        }
        let dh = hidden / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.val(q).data();
        let kd = self.val(k).data();
        let vd = self.val(v).data();
        let mut probs = vec![E::ZERO; batch * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(rows, hidden);
        let mut scores = vec![E::ZERO; seq_len];
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qrow = &qd[(base + i) * hidden + off..(base + i) * hidden + off + dh];
                    let mut max = E::from_f64(f64::NEG_INFINITY);
                    for j in 0..seq_len {
                        if masks[b][j] {
                            continue;
                        }
                        let krow = &kd[(base + j) * hidden + off..(base + j) * hidden + off + dh];
                        let mut dot = E::ZERO;
                        for d in 0..dh {
                            dot += qrow[d] * krow[d];
                        }
                        let s = dot * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = E::ZERO;
                    for j in 0..seq_len {
                        if masks[b][j] {
                            scores[j] = E::ZERO;
                        } else {
                            scores[j] = (scores[j] - max).exp();
                            denom += scores[j];
                        }
                    }
                    let p_base = ((b * heads + h) * seq_len + i) * seq_len;
                    let o_row = (base + i) * hidden + off;
                    for j in 0..seq_len {
                        let p = scores[j] / denom;
                        probs[p_base + j] = p;
                        if p != E::ZERO {
                            let vrow = &vd[(base + j) * hidden + off..(base + j) * hidden + off + dh];
                            for d in 0..dh {
                                out.data_mut()[o_row + d] += p * vrow[d];
                            }
                        }
                    }
                }
            }
        }
        let needs_grad = self.needs(q) || self.needs(k) || self.needs(v);
        let aux = if needs_grad { Aux::AttnProbs(probs) } else { Aux::None };
        self.push(
            "multi_head_attention",
            Node {
                op: Op::MultiHeadAttention { q, k, v, heads, seq_len, masks: masks.to_vec() },
                value: out,
                needs_grad,
                aux,
            },
        )
    }

    /// Mean negative log-likelihood of `targets[i]` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var, TensorError> {
        let (r, c) = self.val(logits).shape();
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {r} rows", targets.len()),
            });
        }
        for &t in targets {
            if t as usize >= c {
                return Err(TensorError::Invalid {
                    op: "softmax_cross_entropy",
                    detail: format!("target {t} out of range for {c} classes"),
                });
            }
        }
        let mut probs = Tensor::zeros(r, c);
        let mut total = E::ZERO;
        for i in 0..r {
            let row = self.val(logits).row(i);
            let m = row.iter().copied().fold(row[0], E::maximum);
            let mut denom = E::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs.set(i, j, e);
                denom += e;
            }
            let lse = m + denom.ln();
            total += lse - row[targets[i] as usize];
            for j in 0..c {
                let v = probs.get(i, j) / denom;
                probs.set(i, j, v);
            }
        }
        let loss = total / E::from_f64(r as f64);
        let needs_grad = self.needs(logits);
        let aux = if needs_grad { Aux::Probs(probs) } else { Aux::None };
        self.push(
            "softmax_cross_entropy",
            Node { op: Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() }, value: Tensor::scalar(loss), needs_grad, aux },
        )
    }

    /// Consumes the graph, propagating `d loss / d node` to every node that
    /// requires a gradient. `loss` must be scalar.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        let (lr, lc) = self.nodes[loss.0].value.shape();
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            // Nothing trainable participates in the loss.
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(E::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                // C = A' B' with A' = ta ? A^T : A, B' = tb ? B^T : B.
                if self.needs(*a) {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let slot = &mut grads[a.0];
                    let acc = slot.is_some();
                    let g = slot.get_or_insert_with(|| Tensor::zeros(av.rows(), av.cols()));
                    let beta = if acc { E::ONE } else { E::ZERO };
                    if *ta {
                        // dA = B' dC^T
                        matmul_into(g, bv, *tb, dy, true, E::ONE, beta);
                    } else {
                        // dA = dC B'^T
                        matmul_into(g, dy, false, bv, !*tb, E::ONE, beta);
                    }
                }
                if self.needs(*b) {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let slot = &mut grads[b.0];
                    let acc = slot.is_some();
                    let g = slot.get_or_insert_with(|| Tensor::zeros(bv.rows(), bv.cols()));
                    let beta = if acc { E::ONE } else { E::ZERO };
                    if *tb {
                        // dB = dC^T A'
                        matmul_into(g, dy, true, av, *ta, E::ONE, beta);
                    } else {
                        // dB = A'^T dC
                        matmul_into(g, av, !*ta, dy, false, E::ONE, beta);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut d = dy.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.val(*b).data()) {
                        *g *= v;
                    }
                    accumulate(&mut grads[a.0], d);
                }
                if self.needs(*b) {
                    let mut d = dy.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.val(*a).data()) {
                        *g *= v;
                    }
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let mut d = dy.clone();
                    d.scale_assign(*c);
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], dy.clone());
                }
                if self.needs(*bias) {
                    let c = dy.cols();
                    let mut d = Tensor::zeros(1, c);
                    for r in 0..dy.rows() {
                        for j in 0..c {
                            let v = d.get(0, j) + dy.get(r, j);
                            d.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads[bias.0], d);
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let (r, c) = dy.shape();
                    let mut d = Tensor::zeros(c, r);
                    for i in 0..r {
                        for j in 0..c {
                            d.set(j, i, dy.get(i, j));
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (r, c) = y.shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let mut dot = E::ZERO;
                        for j in 0..c {
                            dot += dy.get(row, j) * y.get(row, j);
                        }
                        for j in 0..c {
                            d.set(row, j, y.get(row, j) * (dy.get(row, j) - dot));
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (r, c) = y.shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let sum: E = (0..c).map(|j| dy.get(row, j)).sum();
                        for j in 0..c {
                            d.set(row, j, dy.get(row, j) - y.get(row, j).exp() * sum);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xhat, inv_std) = match &self.nodes[i].aux {
                    Aux::LayerNorm { xhat, inv_std } => (xhat, inv_std),
                    _ => unreachable!("layer_norm aux missing"),
                };
                let (r, c) = xhat.shape();
                let n = E::from_f64(c as f64);
                if self.needs(*x) {
                    let gv = self.val(*gain);
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let mut sum_dxhat = E::ZERO;
                        let mut sum_dxhat_xhat = E::ZERO;
                        for j in 0..c {
                            let dxh = dy.get(row, j) * gv.get(0, j);
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.get(row, j);
                        }
                        let mean_dxhat = sum_dxhat / n;
                        let mean_dxhat_xhat = sum_dxhat_xhat / n;
                        for j in 0..c {
                            let dxh = dy.get(row, j) * gv.get(0, j);
                            let v = inv_std[row] * (dxh - mean_dxhat - xhat.get(row, j) * mean_dxhat_xhat);
                            d.set(row, j, v);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if self.needs(*gain) {
                    let mut d = Tensor::zeros(1, c);
                    for row in 0..r {
                        for j in 0..c {
                            let v = d.get(0, j) + dy.get(row, j) * xhat.get(row, j);
                            d.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads[gain.0], d);
                }
                if self.needs(*bias) {
                    let mut d = Tensor::zeros(1, c);
                    for row in 0..r {
                        for j in 0..c {
                            let v = d.get(0, j) + dy.get(row, j);
                            d.set(0, j, v);
                        }
                    }
                    accumulate(&mut grads[bias.0], d);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let cc = E::from_f64(GELU_C);
                    let k = E::from_f64(GELU_K);
                    let half = E::from_f64(0.5);
                    let three = E::from_f64(3.0);
                    let mut d = dy.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.val(*x).data()) {
                        let u = cc * (v + k * v * v * v);
                        let t = u.tanh();
                        let sech2 = E::ONE - t * t;
                        let du = cc * (E::ONE + three * k * v * v);
                        *g *= half * (E::ONE + t) + half * v * sech2 * du;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::GatherRows { x, indices } => {
                if self.needs(*x) {
                    let (r, c) = self.val(*x).shape();
                    let slot = &mut grads[x.0];
                    let g = slot.get_or_insert_with(|| Tensor::zeros(r, c));
                    for (out_row, &ix) in indices.iter().enumerate() {
                        let base = ix as usize * c;
                        for j in 0..c {
                            g.data_mut()[base + j] += dy.get(out_row, j);
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let pr = self.val(p).rows();
                    let c = self.val(p).cols();
                    if self.needs(p) {
                        let data = dy.data()[at * c..(at + pr) * c].to_vec();
                        accumulate(&mut grads[p.0], Tensor::from_vec(pr, c, data));
                    }
                    at += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let pc = self.val(p).cols();
                    let r = self.val(p).rows();
                    if self.needs(p) {
                        let mut d = Tensor::zeros(r, pc);
                        for row in 0..r {
                            for j in 0..pc {
                                d.set(row, j, dy.get(row, at + j));
                            }
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    at += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let (r, c) = self.val(*x).shape();
                    let slot = &mut grads[x.0];
                    let g = slot.get_or_insert_with(|| Tensor::zeros(r, c));
                    let base = start * c;
                    for (idx, &v) in dy.data().iter().enumerate() {
                        g.data_mut()[base + idx] += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (r, c) = self.val(*x).shape();
                    let slot = &mut grads[x.0];
                    let g = slot.get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..dy.rows() {
                        for j in 0..dy.cols() {
                            g.data_mut()[row * c + start + j] += dy.get(row, j);
                        }
                    }
                }
            }
            Op::MaskedFillCols { x, mask } => {
                if self.needs(*x) {
                    let mut d = dy.clone();
                    let c = d.cols();
                    for row in 0..d.rows() {
                        for (j, &m) in mask.iter().enumerate() {
                            if m {
                                d.data_mut()[row * c + j] = E::ZERO;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::ReduceMean { x } => {
                if self.needs(*x) {
                    let (r, c) = self.val(*x).shape();
                    let v = dy.item() / E::from_f64((r * c) as f64);
                    accumulate(&mut grads[x.0], Tensor::from_vec(r, c, vec![v; r * c]));
                }
            }
            Op::ReduceSum { x } => {
                if self.needs(*x) {
                    let (r, c) = self.val(*x).shape();
                    let v = dy.item();
                    accumulate(&mut grads[x.0], Tensor::from_vec(r, c, vec![v; r * c]));
                }
            }
            Op::Log { x } => {
                if self.needs(*x) {
                    let mut d = dy.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.val(*x).data()) {
                        *g /= v;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let mut d = dy.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *g *= v;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::MultiHeadAttention { q, k, v, heads, seq_len, masks } => {
                let probs = match &self.nodes[i].aux {
                    Aux::AttnProbs(p) => p,
                    _ => unreachable!("attention aux missing"),
                };
                let (rows, hidden) = self.val(*q).shape();
                let heads = *heads;
                let seq_len = *seq_len;
                let batch = rows / seq_len;
                let dh = hidden / heads;
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                let qd = self.val(*q).data();
                let kd = self.val(*k).data();
                let vd = self.val(*v).data();
                let needs_q = self.needs(*q);
                let needs_k = self.needs(*k);
                let needs_v = self.needs(*v);
                let mut dq = if needs_q { Some(Tensor::zeros(rows, hidden)) } else { None };
                let mut dk = if needs_k { Some(Tensor::zeros(rows, hidden)) } else { None };
                let mut dv = if needs_v { Some(Tensor::zeros(rows, hidden)) } else { None };
                let mut d_attn = vec![E::ZERO; seq_len];
                for b in 0..batch {
                    let base = b * seq_len;
                    for h in 0..heads {
                        let off = h * dh;
                        for qi in 0..seq_len {
                            let p_base = ((b * heads + h) * seq_len + qi) * seq_len;
                            let dy_row = &dy.data()[(base + qi) * hidden + off
                                ..(base + qi) * hidden + off + dh];
                            // dA_ij = dy_i . v_j ; dV_j += p_ij * dy_i
                            let mut dot_pa = E::ZERO;
                            for j in 0..seq_len {
                                if masks[b][j] {
                                    d_attn[j] = E::ZERO;
                                    continue;
                                }
                                let p = probs[p_base + j];
                                let vrow = &vd[(base + j) * hidden + off
                                    ..(base + j) * hidden + off + dh];
                                let mut da = E::ZERO;
                                for d in 0..dh {
                                    da += dy_row[d] * vrow[d];
                                }
                                d_attn[j] = da;
                                dot_pa += p * da;
                                if let Some(dv) = dv.as_mut() {
                                    let dst = (base + j) * hidden + off;
                                    for d in 0..dh {
                                        dv.data_mut()[dst + d] += p * dy_row[d];
                                    }
                                }
                            }
                            // softmax backward then into q and k
                            for j in 0..seq_len {
                                if masks[b][j] {
                                    continue;
                                }
                                let p = probs[p_base + j];
                                let ds = p * (d_attn[j] - dot_pa) * scale;
                                if ds == E::ZERO {
                                    continue;
                                }
                                if let Some(dq) = dq.as_mut() {
                                    let krow = &kd[(base + j) * hidden + off
                                        ..(base + j) * hidden + off + dh];
                                    let dst = (base + qi) * hidden + off;
                                    for d in 0..dh {
                                        dq.data_mut()[dst + d] += ds * krow[d];
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    let qrow = &qd[(base + qi) * hidden + off
                                        ..(base + qi) * hidden + off + dh];
                                    let dst = (base + j) * hidden + off;
                                    for d in 0..dh {
                                        dk.data_mut()[dst + d] += ds * qrow[d];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dq {
                    accumulate(&mut grads[q.0], d);
                }
                if let Some(d) = dk {
                    accumulate(&mut grads[k.0], d);
                }
                if let Some(d) = dv {
                    accumulate(&mut grads[v.0], d);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let probs = match &self.nodes[i].aux {
                        Aux::Probs(p) => p,
                        _ => unreachable!("cross-entropy aux missing"),
                    };
                    let r = probs.rows();
                    let scale = dy.item() / E::from_f64(r as f64);
                    let mut d = probs.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        let v = d.get(row, t as usize) - E::ONE;
                        d.set(row, t as usize, v);
                    }
                    for v in d.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
        }
    }
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Graph::new()
    }
}

fn accumulate<E: Scalar>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) {
    match slot {
        Some(t) => t.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

/// Per-node gradients produced by [`Graph::backward`].
///
/// A leaf that did not participate in the loss has no entry; its gradient is
/// exactly zero.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 1.0, -1.0]), false);
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).get(0, 0), 0.0);
        // gelu(1) ~ 0.8412, gelu(-1) ~ -0.1588 under the tanh approximation
        assert!(close(g.value(y).get(0, 1), 0.841192, 1e-5));
        assert!(close(g.value(y).get(0, 2), -0.158808, 1e-5));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]), false);
        let y = g.softmax(x).unwrap();
        for j in 0..3 {
            assert!(close(g.value(y).get(0, j), 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn layer_norm_hand_value() {
        // mean 2, population std sqrt(2/3): [1,2,3] -> [-1.2247, 0, 1.2247]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]), false);
        let gain = g.leaf(Tensor::from_vec(1, 3, vec![1.0; 3]), false);
        let bias = g.leaf(Tensor::from_vec(1, 3, vec![0.0; 3]), false);
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(close(g.value(y).get(0, 0), -1.224744871, 1e-6));
        assert!(close(g.value(y).get(0, 1), 0.0, 1e-9));
        assert!(close(g.value(y).get(0, 2), 1.224744871, 1e-6));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(w ⊙ w), w = [1,2] -> grad [2,4]
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
        let unused = g.leaf(Tensor::from_vec(1, 2, vec![5.0, 6.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
        let y = g.mul(w, w).unwrap();
        assert!(matches!(
            g.backward(y).err(),
            Some(TensorError::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn empty_graph_rejected() {
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(Var(0)), Err(TensorError::EmptyGraph)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(1, 2, vec![0.0, -1.0]), false);
        assert!(matches!(g.log(x), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(2, 3), false);
        let b = g.leaf(Tensor::zeros(2, 3), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn matmul_transpose_flags_match_materialized_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]), false);
        let b = g.leaf(Tensor::from_vec(2, 3, vec![7., 8., 9., 10., 11., 12.]), false);
        let via_flags = g.matmul_t(a, false, b, true).unwrap();
        let bt = g.transpose(b).unwrap();
        let via_mat = g.matmul(a, bt).unwrap();
        assert!(g.value(via_flags).bit_eq(g.value(via_mat)));
    }

    #[test]
    fn gather_rows_out_of_range_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(3, 2), false);
        assert!(g.gather_rows(x, &[0, 3]).is_err());
    }

    /// The fused attention node must agree with the same computation spelled
    /// out in slice / matmul / masked-fill / softmax / concat primitives,
    /// both in values and in gradients.
    #[test]
    fn fused_attention_matches_composed_primitives() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let (batch, t, hidden, heads) = (2usize, 4usize, 6usize, 2usize);
        let dh = hidden / heads;
        let rows = batch * t;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::<f64>::from_vec(
                rows,
                hidden,
                (0..rows * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        let (qv, kv, vv) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let proj = mk(&mut rng);
        let masks = vec![vec![false, false, true, true], vec![false, false, false, true]];

        let composed = |g: &mut Graph<f64>, q: Var, k: Var, v: Var| -> Result<Var, TensorError> {
            let scale = 1.0 / (dh as f64).sqrt();
            let mut seq_ctx = Vec::new();
            for b in 0..batch {
                let qb = g.slice_rows(q, b * t, t)?;
                let kb = g.slice_rows(k, b * t, t)?;
                let vb = g.slice_rows(v, b * t, t)?;
                let mut head_ctx = Vec::new();
                for h in 0..heads {
                    let qh = g.slice_cols(qb, h * dh, dh)?;
                    let kh = g.slice_cols(kb, h * dh, dh)?;
                    let vh = g.slice_cols(vb, h * dh, dh)?;
                    let s = g.matmul_t(qh, false, kh, true)?;
                    let s = g.scale(s, scale)?;
                    let s = g.masked_fill_cols(s, &masks[b], -1e9)?;
                    let a = g.softmax(s)?;
                    head_ctx.push(g.matmul(a, vh)?);
                }
                seq_ctx.push(g.concat_cols(&head_ctx)?);
            }
            g.concat_rows(&seq_ctx)
        };

        let run = |use_fused: bool| -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
            let mut g = Graph::<f64>::new();
            let q = g.leaf(qv.clone(), true);
            let k = g.leaf(kv.clone(), true);
            let v = g.leaf(vv.clone(), true);
            let ctx = if use_fused {
                g.multi_head_attention(q, k, v, heads, t, &masks).unwrap()
            } else {
                composed(&mut g, q, k, v).unwrap()
            };
            let value = g.value(ctx).clone();
            let pc = g.constant(proj.clone());
            let prod = g.mul(ctx, pc).unwrap();
            let loss = g.reduce_sum(prod).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                value,
                grads.get(q).unwrap().clone(),
                grads.get(k).unwrap().clone(),
                grads.get(v).unwrap().clone(),
            )
        };

        let (fv, fq, fk, fvv) = run(true);
        let (cv, cq, ck, cvv) = run(false);
        let close = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-10)
        };
        assert!(close(&fv, &cv), "values differ");
        assert!(close(&fq, &cq), "dq differs");
        assert!(close(&fk, &ck), "dk differs");
        assert!(close(&fvv, &cvv), "dv differs");
    }
}
