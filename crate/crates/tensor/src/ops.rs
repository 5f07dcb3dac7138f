//! Functional (gradient-free) tensor operations.
//!
//! The autodiff graph calls into these for its forward values, so the plain
//! and differentiable paths always agree.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)?.check_finite("matmul")
}

/// Softmax along `axis`, stabilised by max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let shape = x.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = out[base + j * inner];
            }
            kernels::softmax_row(&mut lane, None);
            for (j, v) in lane.iter().enumerate() {
                out[base + j * inner] = *v;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Softmax over the last axis of a rank-2 tensor, with an optional per-column
/// keep mask shared by every row.
pub fn softmax_rows_masked(x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2("softmax")?;
    if let Some(k) = keep {
        if k.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "softmax mask",
                lhs: vec![c],
                rhs: vec![k.len()],
            });
        }
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let mut out = x.data().to_vec();
    for i in 0..r {
        if !kernels::softmax_row(&mut out[i * c..(i + 1) * c], keep) {
            return Err(TensorError::AllMasked { op: "softmax" });
        }
    }
    Tensor::new(&[r, c], out)
}

/// Output and cached statistics of a row-wise layer norm.
pub(crate) struct LayerNormOut {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_cached(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormOut> {
    let (r, c) = x.dims2("layer_norm")?;
    if c < 2 {
        return Err(TensorError::Invalid(format!(
            "layer_norm needs a last axis of at least 2, got {c}"
        )));
    }
    if gain.len() != c || bias.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "layer_norm" });
    }
    let mut xhat = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    let mut out = vec![0.0; r * c];
    let (g, b) = (gain.data(), bias.data());
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[i * c + j] = h;
            out[i * c + j] = h * g[j] + b[j];
        }
    }
    Ok(LayerNormOut {
        out: Tensor::new(&[r, c], out)?.check_finite("layer_norm")?,
        xhat,
        inv_std,
    })
}

/// Row-wise layer norm with affine gain and bias over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_cached(x, gain, bias)?.out)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(kernels::gelu).check_finite("gelu")
}

/// Validates cross-entropy inputs; returns `(rows, classes, kept rows)`.
pub(crate) fn check_ce(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<(usize, usize, usize)> {
    let (t, k) = logits.dims2("cross_entropy")?;
    if targets.len() != t || mask.len() != t {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![t],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    for (&y, &m) in targets.iter().zip(mask) {
        if m && y >= k {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: y,
                limit: k,
            });
        }
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(TensorError::AllMasked { op: "cross_entropy" });
    }
    Ok((t, k, kept))
}

/// Mean negative log-softmax of the target class over unmasked rows.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (_, k, kept) = check_ce(logits, targets, mask)?;
    if !logits.is_finite() {
        return Err(TensorError::NonFinite { op: "cross_entropy" });
    }
    let mut total = 0.0;
    for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        total += row_nll(&logits.data()[i * k..(i + 1) * k], y);
    }
    Ok(total / kept as f64)
}

/// `-log softmax(row)[y]` via log-sum-exp.
pub(crate) fn row_nll(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    (lse - row[y]).max(0.0)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
