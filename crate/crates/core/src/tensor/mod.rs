//! Dense row-major tensors with a small reverse-mode autodiff graph.
//!
//! Everything here works in `f64`. The kernels in this module are plain
//! functions on [`Tensor`] values; [`Graph`] records them and knows how to
//! run them backwards. [`grad_check`] compares the two against central
//! finite differences.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Normalization epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected} elements for shape {shape:?}, got {got}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                op: "tensor",
                shape,
                expected,
                got: data.len(),
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (product of all leading dims).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Values rounded through `f32`, the inference-only storage mode.
    pub fn round_to_f32(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sub-matrix `[r0..r0+rows, c0..c0+cols]` of a 2-D tensor.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor {
        let width = self.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.data[r * width + c0..r * width + c0 + cols]);
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    check_finite(op, &t.data)?;
    Ok(t)
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected a 2-D tensor, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    finite("matmul", Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`. This is how a weight stored as
/// `[out, in]` is applied to row-vector activations.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul_t", a)?;
    let (n, k2) = require_2d("matmul_t", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_t",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    finite("matmul_t", Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `aᵀ · b` for `a: [m, k]`, `b: [m, n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![k, n], out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Non-affine layer norm over the last dimension.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, eps).map(|(y, _)| y)
}

/// Layer norm output together with each row's reciprocal standard deviation.
pub(crate) fn layer_norm_with_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let cols = x.cols();
    if cols == 0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: "last dimension must be at least 1".into(),
        });
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    let y = finite(
        "layer_norm",
        Tensor::from_parts_unchecked(x.shape.clone(), out),
    )?;
    Ok((y, rstds))
}

/// Softmax along the last axis, stabilized by subtracting each row's max.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols.max(1)) {
        softmax_in_place(row);
    }
    finite("softmax", Tensor::from_parts_unchecked(x.shape.clone(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stabilized.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = g.cross_entropy(l, targets, None)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let c = Tensor::from_rows(&[vec![5.0; 4]]).unwrap();
        assert_eq!(layer_norm(&c, LAYER_NORM_EPS).unwrap().data(), &[0.0; 4]);
        let s = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&s, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 7], 2.0, &mut rng);
        let y = layer_norm(&x, LAYER_NORM_EPS).unwrap();
        let row = x.row(0);
        let mu: f64 = row.iter().sum::<f64>() / 7.0;
        let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
        for (i, v) in row.iter().enumerate() {
            let want = (v - mu) / (var + LAYER_NORM_EPS).sqrt();
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
        assert!(y.data().iter().sum::<f64>().abs() / 7.0 < 1e-10);
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let y = softmax(&x).unwrap();
        assert_eq!(&y.data()[..2], &[0.5, 0.5]);
        assert!((y.data()[2] - 1.0).abs() < 1e-12 && y.data()[3].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 6], 3.0, &mut rng);
        let y = softmax(&x).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b.exp() / denom).abs() < 1e-12);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 8]);
        let ce = cross_entropy(&uniform, &[0, 4, 7]).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::zeros(&[1, 4]);
        confident.data_mut()[2] = 60.0;
        assert!(cross_entropy(&confident, &[2]).unwrap() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[4, 5], 1.5, &mut rng);
        let targets = [1, 0, 4, 2];
        let want: f64 = (0..4)
            .map(|r| {
                let row = logits.row(r);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[targets[r]]
            })
            .sum::<f64>()
            / 4.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&logits, &[0, 0, 0, 5]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nan_is_rejected() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }
}
