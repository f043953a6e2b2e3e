//! Primitive differentiable operations.
//!
//! The `Tensor`-level functions validate shapes and finiteness; the slice
//! kernels at the bottom are the unchecked hot-path versions the models use.

use super::tensor::{check_finite, Tensor};
use crate::{Error, Result};

pub const KL_FLOOR: f64 = 1e-12;
pub const BCE_CLAMP: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Row `index` of an `f × d` table.
pub fn embedding_lookup(table: &Tensor, index: usize) -> Result<Tensor> {
    if table.shape().len() != 2 {
        return Err(Error::shape(format!("embedding table must be 2-D, got {:?}", table.shape())));
    }
    if index >= table.rows() {
        return Err(Error::Bounds { index, len: table.rows() });
    }
    Tensor::vector(table.row(index).to_vec())
}

/// Gradient of a lookup w.r.t. the table: `dy` lands in row `index` only.
pub fn embedding_lookup_backward(table_shape: &[usize], index: usize, dy: &Tensor) -> Result<Tensor> {
    if table_shape.len() != 2 || dy.len() != table_shape[1] {
        return Err(Error::shape("embedding backward shape mismatch"));
    }
    if index >= table_shape[0] {
        return Err(Error::Bounds { index, len: table_shape[0] });
    }
    let mut g = Tensor::zeros(table_shape);
    g.row_mut(index).copy_from_slice(dy.data());
    Ok(g)
}

/// `W·x + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = check_affine(x, w, b)?;
    let mut y = vec![0.0; d_out];
    affine_into(x.data(), w.data(), b.data(), d_in, &mut y);
    finite_vector(y, "affine")
}

/// Returns `(dx, dW, db)` for upstream gradient `dy`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if w.shape().len() != 2 || w.cols() != x.len() || w.rows() != dy.len() {
        return Err(Error::shape("affine backward shape mismatch"));
    }
    let (d_out, d_in) = (w.rows(), w.cols());
    let mut dx = vec![0.0; d_in];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    affine_backward_into(x.data(), w.data(), dy.data(), &mut dx, &mut dw, &mut db);
    Ok((Tensor::vector(dx)?, Tensor::matrix(d_out, d_in, dw)?, Tensor::vector(db)?))
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::shape(format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (d_out, d_in) = (w.rows(), w.cols());
    if x.len() != d_in || b.len() != d_out {
        return Err(Error::shape(format!("affine: W is {d_out}x{d_in}, x has {}, b has {}", x.len(), b.len())));
    }
    Ok((d_out, d_in))
}

pub fn softmax(v: &Tensor) -> Result<Tensor> {
    check_finite(v.data(), "softmax input")?;
    let mut out = vec![0.0; v.len()];
    softmax_into(v.data(), &mut out);
    finite_vector(out, "softmax")
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.len() != dy.len() {
        return Err(Error::shape("softmax backward length mismatch"));
    }
    let mut dx = vec![0.0; y.len()];
    softmax_backward_into(y.data(), dy.data(), &mut dx);
    finite_vector(dx, "softmax backward")
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mse(pred: f64, target: f64) -> f64 {
    (target - pred).powi(2)
}

/// d/dpred of `mse`.
pub fn mse_grad(pred: f64, target: f64) -> f64 {
    2.0 * (pred - target)
}

fn check_simplex(p: &Tensor, name: &str) -> Result<()> {
    check_finite(p.data(), name)?;
    if p.data().iter().any(|&x| x < -SIMPLEX_TOL) {
        return Err(Error::domain(format!("{name} has negative entries")));
    }
    let s: f64 = p.data().iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ p_i ln(p_i / q_i)` with `q` clamped at [`KL_FLOOR`].
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl: length mismatch"));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let kl = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Gradients of `kl_divergence` w.r.t. `p` and `q`.
pub fn kl_divergence_grad(p: &Tensor, q: &Tensor) -> Result<(Tensor, Tensor)> {
    kl_divergence(p, q)?;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; p.len()];
    for i in 0..p.len() {
        let (pi, qi) = (p.data()[i], q.data()[i].max(KL_FLOOR));
        if pi > 0.0 {
            dp[i] = (pi / qi).ln() + 1.0;
        }
        if q.data()[i] >= KL_FLOOR {
            dq[i] = -pi / qi;
        }
    }
    Ok((Tensor::vector(dp)?, Tensor::vector(dq)?))
}

fn check_label(label: f64) -> Result<()> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::domain(format!("label must be 0 or 1, got {label}")));
    }
    Ok(())
}

/// Binary cross-entropy with `pred` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(pred: f64, label: f64) -> Result<f64> {
    check_label(label)?;
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(-label * p.ln() - (1.0 - label) * (1.0 - p).ln())
}

/// Gradient of BCE w.r.t. the pre-sigmoid logit, i.e. `sigmoid(z) - label`.
pub fn bce_logit_grad(prob: f64, label: f64) -> f64 {
    prob - label
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn finite_vector(v: Vec<f64>, what: &str) -> Result<Tensor> {
    check_finite(&v, what)?;
    Tensor::vector(v)
}

// --- slice kernels -------------------------------------------------------

/// `y = W x + b`, `W` row-major `y.len() × d_in`.
#[inline]
pub fn affine_into(x: &[f64], w: &[f64], b: &[f64], d_in: usize, y: &mut [f64]) {
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * d_in..(o + 1) * d_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *yo = acc;
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and `dx += Wᵀ dy`.
#[inline]
pub fn affine_backward_into(x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64], db: &mut [f64]) {
    let d_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &w[o * d_in..(o + 1) * d_in];
        let drow = &mut dw[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
}

#[inline]
pub fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

#[inline]
pub fn softmax_backward_into(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - dot);
    }
}

pub fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

/// `KL(softmax(u) ‖ softmax(v))` and its gradients w.r.t. the logits.
pub fn kl_softmax_logits(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let p = softmax_vec(u);
    let q = softmax_vec(v);
    let (lu, lv) = (logsumexp(u), logsumexp(v));
    let diff: Vec<f64> = (0..u.len()).map(|i| (u[i] - lu) - (v[i] - lv)).collect();
    let kl: f64 = p.iter().zip(&diff).map(|(pi, d)| pi * d).sum();
    let du = (0..u.len()).map(|i| p[i] * (diff[i] - kl)).collect();
    let dv = (0..u.len()).map(|i| q[i] - p[i]).collect();
    (kl.max(0.0), du, dv)
}

pub fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` where the activation was clamped.
pub fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
