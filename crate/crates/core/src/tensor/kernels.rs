//! Value kernels shared by the eager API and the recording graph.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides, so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices whose extents cover every index reached
    // through the given strides (checked by debug asserts at the call sites).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::dim("matmul expects two matrices"));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim(format!("matmul inner dimensions differ: {m}x{k} . {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), (k as isize, 1), b.data(), (n as isize, 1), 0.0, &mut out);
    let t = Tensor::from_parts(vec![m, n], out);
    if !t.is_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(t)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!("softmax axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[idx(t)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Row-wise softmax of a matrix slice into `out`; optional causal mask
/// zeroes entries with column index greater than the row index.
pub(crate) fn softmax_rows_into(src: &[f64], rows: usize, cols: usize, causal: bool, out: &mut [f64]) {
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let limit = if causal { (r + 1).min(cols) } else { cols };
        let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..limit {
            let e = (row[c] - max).exp();
            dst[c] = e;
            sum += e;
        }
        for v in dst[..limit].iter_mut() {
            *v /= sum;
        }
        for v in dst[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

/// Mean negative log-softmax at the target index over a `B×K` batch.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (b, k) = check_ce(logits, targets)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate().take(b) {
        let row = &logits.data()[r * k..(r + 1) * k];
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / b as f64)
}

pub(crate) fn check_ce(logits: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("cross entropy expects a B×K matrix"));
    }
    let (b, k) = (logits.rows(), logits.cols());
    if targets.len() != b {
        return Err(Error::dim(format!("{} targets for a batch of {b}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!("target {bad} not in [0, {k})")));
    }
    Ok((b, k))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes each row to zero mean and unit variance (no affine part).
/// Returns the normalized values and the per-row inverse standard deviation.
pub(crate) fn layer_norm_rows_raw(src: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; src.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = is;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

pub fn layer_norm_rows(x: &Tensor) -> Tensor {
    let (out, _) = layer_norm_rows_raw(x.data(), x.rows(), x.cols());
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}
