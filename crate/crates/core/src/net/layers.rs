//! Layer norm, GELU, softmax and scaled dot-product attention, each with a
//! training forward that keeps what its backward needs.

use super::tensor::{axpy, dot, Mat, Real};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub name: String,
    /// `1×d`
    pub gamma: Mat<T>,
    /// `1×d`
    pub beta: Mat<T>,
}

pub(crate) struct LnCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Mat::from_vec(1, d, vec![T::one(); d]),
            beta: Mat::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        self.forward_train(x).0
    }

    pub(crate) fn forward_train(&self, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let d = x.cols;
        let dn = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let yr = &mut y.data[i * d..(i + 1) * d];
            for j in 0..d {
                yr[j] = xhat.data[i * d + j] * self.gamma.data[j] + self.beta.data[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, cache: &LnCache<T>, dy: &Mat<T>) -> Mat<T> {
        let d = dy.cols;
        let dn = T::lit(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut g = vec![T::zero(); d];
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            for j in 0..d {
                g[j] = dyr[j] * self.gamma.data[j];
            }
            let xh = cache.xhat.row(i);
            let mean_g = g.iter().copied().sum::<T>() / dn;
            let mean_gx = dot(&g, xh) / dn;
            let is = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = is * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            name: self.name.clone(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Sinusoidal position table, `n×d`.
pub fn positions<T: Real>(n: usize, d: usize) -> Mat<T> {
    Mat::from_fn(n, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Per-head attention probabilities kept for the backward pass.
pub(crate) struct AttnCache<T> {
    pub probs: Vec<Mat<T>>,
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q` is `n×(heads·dk)`, `k` is `m×(heads·dk)`, `v` is `m×(heads·dv)`.
/// With `causal`, query `i` only sees keys `j ≤ i` (requires `n == m`).
pub(crate) fn attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    causal: bool,
) -> (Mat<T>, AttnCache<T>) {
    let (n, m) = (q.rows, k.rows);
    let dk = q.cols / heads;
    let dv = v.cols / heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut ctx = Mat::zeros(n, v.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = h * dk..(h + 1) * dk;
        let vs = h * dv..(h + 1) * dv;
        let mut p = Mat::zeros(n, m);
        for i in 0..n {
            let limit = if causal { i + 1 } else { m };
            let qi = &q.row(i)[qs.clone()];
            let prow = p.row_mut(i);
            for j in 0..limit {
                prow[j] = dot(qi, &k.row(j)[qs.clone()]) * scale;
            }
            softmax_in_place(&mut prow[..limit]);
            let crow = &mut ctx.data[i * v.cols..(i + 1) * v.cols];
            for j in 0..limit {
                axpy(prow[j], &v.row(j)[vs.clone()], &mut crow[vs.clone()]);
            }
        }
        probs.push(p);
    }
    (ctx, AttnCache { probs })
}

/// Public form of the attention kernel: context rows plus per-head probability matrices.
pub fn scaled_dot_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    causal: bool,
) -> (Mat<T>, Vec<Mat<T>>) {
    let (ctx, cache) = attention(q, k, v, heads, causal);
    (ctx, cache.probs)
}

/// Returns `(dq, dk, dv)` for upstream gradient `dctx`.
pub(crate) fn attention_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    causal: bool,
    cache: &AttnCache<T>,
    dctx: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let (n, m) = (q.rows, k.rows);
    let dk_w = q.cols / heads;
    let dv_w = v.cols / heads;
    let scale = T::one() / T::lit(dk_w as f64).sqrt();
    let mut dq = Mat::zeros(n, q.cols);
    let mut dk = Mat::zeros(m, k.cols);
    let mut dv = Mat::zeros(m, v.cols);
    let mut dp = vec![T::zero(); m];
    for h in 0..heads {
        let qs = h * dk_w..(h + 1) * dk_w;
        let vs = h * dv_w..(h + 1) * dv_w;
        let p = &cache.probs[h];
        for i in 0..n {
            let limit = if causal { i + 1 } else { m };
            let prow = &p.row(i)[..limit];
            let dci = &dctx.row(i)[vs.clone()];
            for j in 0..limit {
                dp[j] = dot(dci, &v.row(j)[vs.clone()]);
                axpy(prow[j], dci, &mut dv.data[j * v.cols..(j + 1) * v.cols][vs.clone()]);
            }
            let inner = dot(prow, &dp[..limit]);
            let qi = &q.row(i)[qs.clone()];
            for j in 0..limit {
                let ds = prow[j] * (dp[j] - inner) * scale;
                if ds != T::zero() {
                    axpy(ds, &k.row(j)[qs.clone()], &mut dq.data[i * q.cols..(i + 1) * q.cols][qs.clone()]);
                    axpy(ds, qi, &mut dk.data[j * k.cols..(j + 1) * k.cols][qs.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}
