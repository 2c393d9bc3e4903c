// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward kernels shared by the tape and the tape-free inference path.

use crate::error::{Error, Result};

use super::tensor::{gemm, Real, Tensor, View, ViewMut};

/// Stability constant in the layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn as_matrix<F: Real>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dims(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m x k] * b[k x n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(
        m,
        k,
        n,
        F::one(),
        View::row_major(a.data(), k),
        View::row_major(b.data(), n),
        F::zero(),
        ViewMut::row_major(&mut out, n),
    );
    Tensor::new(vec![m, n], out)
}

/// `a[m x k] * b[n x k]^T`.
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = as_matrix(a, "matmul_nt")?;
    let (n, k2) = as_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dims("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(
        m,
        k,
        n,
        F::one(),
        View::row_major(a.data(), k),
        View::transposed(b.data(), k),
        F::zero(),
        ViewMut::row_major(&mut out, n),
    );
    Tensor::new(vec![m, n], out)
}

/// Adds `bias` to every row of `x`.
pub fn add_row_bias<F: Real>(x: &mut Tensor<F>, bias: &[F]) -> Result<()> {
    if x.cols() != bias.len() {
        return Err(Error::dims("add_row_bias", x.shape(), &[bias.len()]));
    }
    let c = bias.len();
    for row in x.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
    Ok(())
}

/// In-place softmax over the first `visible(r)` entries of each row `r`;
/// the remaining entries of the row are set to zero.
pub fn softmax_rows_prefix_in_place<F: Real>(
    data: &mut [F],
    cols: usize,
    visible: impl Fn(usize) -> usize,
) {
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let vis = visible(r).min(cols);
        let (live, masked) = row.split_at_mut(vis);
        masked.iter_mut().for_each(|v| *v = F::zero());
        if live.is_empty() {
            continue;
        }
        let max = live.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in live.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = F::one() / total;
        live.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = x.clone();
    let cols = x.cols();
    softmax_rows_prefix_in_place(out.data_mut(), cols, |_| cols);
    Ok(out)
}

/// Causal softmax: row `r` attends to columns `0..=offset + r`.
pub fn softmax_rows_causal<F: Real>(x: &Tensor<F>, offset: usize) -> Tensor<F> {
    let mut out = x.clone();
    let cols = x.cols();
    softmax_rows_prefix_in_place(out.data_mut(), cols, |r| offset + r + 1);
    out
}

/// Layer-norm output together with the per-row statistics backward needs.
#[derive(Clone, Debug)]
pub struct LayerNormOut<F> {
    pub y: Tensor<F>,
    pub xhat: Tensor<F>,
    pub rstd: Vec<F>,
}

/// Normalizes each vector along the last axis, then applies `gain` and `bias`.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &[F], bias: &[F]) -> Result<LayerNormOut<F>> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::contract("layer_norm needs at least 2 features"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dims("layer_norm", x.shape(), &[gain.len()]));
    }
    let eps = F::lit(LN_EPS);
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for (xr, yr) in xhat.data_mut().chunks_mut(d).zip(y.data_mut().chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            xr[i] = h;
            yr[i] = h * gain[i] + bias[i];
        }
        rstd.push(r);
    }
    Ok(LayerNormOut { y, xhat, rstd })
}

pub fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

pub fn gelu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Log-softmax of a single row.
pub fn log_softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Mean negative log-likelihood (nats) of `targets` under row-wise softmax.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    let (t, v) = as_matrix(logits, "cross_entropy")?;
    if targets.len() != t {
        return Err(Error::dims("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if t == 0 {
        return Err(Error::contract("cross_entropy over zero positions"));
    }
    let mut total = F::zero();
    for (i, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(Error::Range {
                what: "target id",
                value: target,
                bound: v,
            });
        }
        let lp = log_softmax_row(logits.row(i));
        total -= lp[target];
    }
    Ok(total / F::from_usize(t).unwrap())
}
