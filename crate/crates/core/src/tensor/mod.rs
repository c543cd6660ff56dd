//! Dense 64-bit arrays and a reverse-mode tape covering the operations the
//! model needs.

mod gradcheck;
mod rng;
mod tape;

pub use gradcheck::{grad_check, CoordCheck, GradCheckConfig, GradCheckReport};
pub use rng::{Rng, Stream};
pub use tape::{Gradients, ParamGrads, ParamId, ParamStore, Tape, Var};
pub(crate) use tape::{bce_logit, sigmoid};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense array. Every tensor the tape handles is a matrix; a
/// rank-1 shape `[n]` is read as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `op(a) · op(b)`, where `op` optionally transposes.
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor, TensorError> {
    let (m, k) = if trans_a { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if trans_b { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("[{m}x{k}] · [{k2}x{n}]"),
        ));
    }
    let a_owned;
    let a_data: &[f64] = if trans_a {
        a_owned = a.transpose();
        &a_owned.data
    } else {
        &a.data
    };
    let b_owned;
    let b_data: &[f64] = if trans_b {
        b_owned = b.transpose();
        &b_owned.data
    } else {
        &b.data
    };
    let mut out = vec![0.0; m * n];
    gemm_acc(a_data, b_data, &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `out += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax over the columns where `mask` is true. Masked columns
/// get 0; a row with no unmasked column comes back all zeros.
pub fn masked_softmax_rows(x: &Tensor, mask: &[bool]) -> Result<Tensor, TensorError> {
    let (r, c) = (x.rows(), x.cols());
    if mask.len() != c {
        return Err(shape_err(
            "masked_softmax_rows",
            format!("mask of length {} for {c} columns", mask.len()),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            if mask[j] {
                o[j] = (row[j] - max).exp();
                sum += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Per-row normalization with the biased variance, then `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Returns (output, normalized input, 1/σ per row).
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), TensorError> {
    let (r, d) = (x.rows(), x.cols());
    if gamma.len() != d || beta.len() != d || d == 0 {
        return Err(shape_err(
            "layer_norm",
            format!("width {d}, gamma {}, beta {}", gamma.len(), beta.len()),
        ));
    }
    let mut out = vec![0.0; r * d];
    let mut xhat = vec![0.0; r * d];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[i] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((Tensor::matrix(r, d, out)?, xhat, inv_std))
}
