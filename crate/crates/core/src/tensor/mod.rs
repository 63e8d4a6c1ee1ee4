//! Dense 2-d tensors with reverse-mode automatic differentiation and Adam.
//!
//! Everything the encoders train on lives here: a flat row-major [`Tensor`],
//! a single-owner [`Graph`](graph::Graph) recording primitive applications
//! for the backward pass, and the [`adam`] optimizer with the linear-warmup /
//! exponential-decay learning-rate schedule.

pub mod adam;
pub mod check;
pub mod graph;
pub mod scalar;

pub use adam::{adam_step, lr_at, AdamState, FreezeMask, LrSchedule};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{Dtype, Scalar};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward on an empty graph")]
    EmptyGraph,
    #[error("NaN gradient for parameter {key}")]
    NanGradient { key: String },
}

/// Row-major dense matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![E::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/value length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64s(rows: usize, cols: usize, vals: &[f64]) -> Self {
        Tensor::from_vec(rows, cols, vals.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: E) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: E) {
        for v in self.data.iter_mut() {
            *v *= c;
        }
    }

    /// Lossy element-wise precision conversion.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        )
    }

    /// Exact equality of shape and element bit patterns.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::DTYPE.byte_width());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
        out
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        let w = E::DTYPE.byte_width();
        if bytes.len() != rows * cols * w {
            return None;
        }
        let data = bytes.chunks_exact(w).map(E::from_le_bytes_slice).collect();
        Some(Tensor { rows, cols, data })
    }
}

/// `C(m,n) = A(m,k) * B(k,n)`, with optional logical transposes applied via
/// strides so no operand is materialized.
pub fn matmul_into<E: Scalar>(
    c: &mut Tensor<E>,
    a: &Tensor<E>,
    ta: bool,
    b: &Tensor<E>,
    tb: bool,
    alpha: E,
    beta: E,
) {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "matmul_into inner dims");
    assert_eq!((c.rows, c.cols), (m, n), "matmul_into output dims");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    unsafe {
        E::gemm(
            m,
            ka,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
