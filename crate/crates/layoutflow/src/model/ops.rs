//! Dense-layer, layer-norm, GELU and softmax primitives shared by the
//! forward and backward passes.

use super::{LayerNorm, Linear, LN_EPS};
use crate::scalar::{s, Scalar};

/// `y = W x + b` for a single vector.
pub(crate) fn linear_fwd<S: Scalar>(lin: &Linear<S>, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), lin.in_dim);
    debug_assert_eq!(y.len(), lin.out_dim);
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &lin.w[o * lin.in_dim..(o + 1) * lin.in_dim];
        let mut acc = lin.b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *yo = acc;
    }
}

/// Token-major batch of [`linear_fwd`]: `xs` is `n x in_dim`.
pub(crate) fn linear_fwd_batch<S: Scalar>(lin: &Linear<S>, xs: &[S], n: usize) -> Vec<S> {
    let mut ys = vec![S::zero(); n * lin.out_dim];
    for tok in 0..n {
        let x = &xs[tok * lin.in_dim..(tok + 1) * lin.in_dim];
        let y = &mut ys[tok * lin.out_dim..(tok + 1) * lin.out_dim];
        linear_fwd(lin, x, y);
    }
    ys
}

/// Reverse-mode step for one vector through a dense layer: accumulates
/// `dW += dy (x)T`, `db += dy`, and optionally `dx += WT dy`.
pub(crate) fn linear_bwd<S: Scalar>(
    lin: &Linear<S>,
    grad: &mut Linear<S>,
    x: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
) {
    for (o, dyo) in dy.iter().enumerate() {
        grad.b[o] += *dyo;
        let grow = &mut grad.w[o * lin.in_dim..(o + 1) * lin.in_dim];
        for (gw, xi) in grow.iter_mut().zip(x) {
            *gw += *dyo * *xi;
        }
    }
    if let Some(dx) = dx {
        for (o, dyo) in dy.iter().enumerate() {
            let row = &lin.w[o * lin.in_dim..(o + 1) * lin.in_dim];
            for (dxi, wi) in dx.iter_mut().zip(row) {
                *dxi += *wi * *dyo;
            }
        }
    }
}

/// Batched [`linear_bwd`]; returns `dx` as a fresh `n x in_dim` buffer.
pub(crate) fn linear_bwd_batch<S: Scalar>(
    lin: &Linear<S>,
    grad: &mut Linear<S>,
    xs: &[S],
    dys: &[S],
    n: usize,
) -> Vec<S> {
    let mut dxs = vec![S::zero(); n * lin.in_dim];
    for tok in 0..n {
        let x = &xs[tok * lin.in_dim..(tok + 1) * lin.in_dim];
        let dy = &dys[tok * lin.out_dim..(tok + 1) * lin.out_dim];
        let dx = &mut dxs[tok * lin.in_dim..(tok + 1) * lin.in_dim];
        linear_bwd(lin, grad, x, dy, Some(dx));
    }
    dxs
}

/// Per-token normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LnTrace<S> {
    /// Normalized activations before gain/bias, `n x dim`.
    pub(crate) xhat: Vec<S>,
    /// Reciprocal standard deviation per token.
    pub(crate) rstd: Vec<S>,
}

/// Layer norm over each token's feature vector; returns the output and
/// the trace needed to run [`layer_norm_bwd`].
pub(crate) fn layer_norm_fwd<S: Scalar>(
    ln: &LayerNorm<S>,
    xs: &[S],
    n: usize,
) -> (Vec<S>, LnTrace<S>) {
    let dim = ln.gain.len();
    let eps = s::<S>(LN_EPS);
    let inv_dim = S::one() / s::<S>(dim as f64);
    let mut ys = vec![S::zero(); n * dim];
    let mut xhat = vec![S::zero(); n * dim];
    let mut rstd = vec![S::zero(); n];
    for tok in 0..n {
        let x = &xs[tok * dim..(tok + 1) * dim];
        let mean = x.iter().copied().sum::<S>() * inv_dim;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_dim;
        let r = (var + eps).sqrt().recip();
        rstd[tok] = r;
        for i in 0..dim {
            let h = (x[i] - mean) * r;
            xhat[tok * dim + i] = h;
            ys[tok * dim + i] = ln.gain[i] * h + ln.bias[i];
        }
    }
    (ys, LnTrace { xhat, rstd })
}

/// Reverse-mode layer norm: accumulates gain/bias gradients and returns
/// the input adjoint.
pub(crate) fn layer_norm_bwd<S: Scalar>(
    ln: &LayerNorm<S>,
    grad: &mut LayerNorm<S>,
    trace: &LnTrace<S>,
    dys: &[S],
    n: usize,
) -> Vec<S> {
    let dim = ln.gain.len();
    let inv_dim = S::one() / s::<S>(dim as f64);
    let mut dxs = vec![S::zero(); n * dim];
    let mut dxhat = vec![S::zero(); dim];
    for tok in 0..n {
        let base = tok * dim;
        let xhat = &trace.xhat[base..base + dim];
        let dy = &dys[base..base + dim];
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for i in 0..dim {
            grad.gain[i] += dy[i] * xhat[i];
            grad.bias[i] += dy[i];
            let dh = dy[i] * ln.gain[i];
            dxhat[i] = dh;
            m1 += dh;
            m2 += dh * xhat[i];
        }
        m1 *= inv_dim;
        m2 *= inv_dim;
        let r = trace.rstd[tok];
        for i in 0..dim {
            dxs[base + i] = r * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    dxs
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = s::<S>(GELU_C);
    let a = s::<S>(GELU_A);
    let half = s::<S>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = s::<S>(GELU_C);
    let a = s::<S>(GELU_A);
    let half = s::<S>(0.5);
    let three = s::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// In-place stable softmax over a slice.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
