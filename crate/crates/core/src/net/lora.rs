//! Low-rank adapters on frozen linear maps: `h = W0·x + (α/r)·B·(A·x)`.
//!
//! Shapes follow the usual convention: `W0` is `d×k` (out × in), `A` is `r×k`,
//! `B` is `d×r`. `B` starts at zero so an untrained adapter is an exact no-op.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{matmul, matmul_t, matmul_t_acc, matmul_tn_acc, Mat, Real};
use super::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    /// Gaussian `A` (given std), zero `B`.
    pub fn init(rank: usize, d_in: usize, d_out: usize, alpha: f64, std: f64, rng: &mut impl Rng) -> Self {
        let a = Mat::from_fn(rank, d_in, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        });
        Self {
            a,
            b: Mat::zeros(d_out, rank),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    /// `α / r`, or 0 for a rank-0 adapter.
    pub fn scale(&self) -> T {
        match self.rank() {
            0 => T::zero(),
            r => T::lit(self.alpha / r as f64),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
        }
    }
}

/// Applies one adapted linear map to a single vector.
pub fn lora_linear<T: Real>(
    x: &[T],
    w0: &Mat<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Vec<T>, NetError> {
    if x.len() != w0.cols {
        return Err(NetError::ShapeMismatch(format!(
            "input length {} vs W0 {}×{}",
            x.len(),
            w0.rows,
            w0.cols
        )));
    }
    let mut h: Vec<T> = (0..w0.rows)
        .map(|i| (0..w0.cols).fold(T::zero(), |s, j| s + w0.get(i, j) * x[j]))
        .collect();
    if let Some(ad) = adapter {
        let r = ad.rank();
        if ad.a.cols != w0.cols || ad.b.rows != w0.rows || ad.b.cols != r {
            return Err(NetError::ShapeMismatch(format!(
                "adapter A {:?} B {:?} vs W0 {:?}",
                ad.a.shape(),
                ad.b.shape(),
                w0.shape()
            )));
        }
        let ax: Vec<T> = (0..r)
            .map(|p| (0..ad.a.cols).fold(T::zero(), |s, j| s + ad.a.get(p, j) * x[j]))
            .collect();
        let scale = ad.scale();
        for (i, hi) in h.iter_mut().enumerate() {
            let bax = (0..r).fold(T::zero(), |s, p| s + ad.b.get(i, p) * ax[p]);
            *hi += scale * bax;
        }
    }
    Ok(h)
}

/// Trainable vs frozen parameters for one `d×k` layer adapted at rank `r`.
pub fn layer_param_counts(d: usize, k: usize, r: usize) -> (usize, usize) {
    (r * (d + k), d * k)
}

/// Gradient buffers for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
}

/// A frozen linear map with an optional adapter. Rows of the input are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub name: String,
    pub w0: Mat<T>,
    pub lora: Option<LoraAdapter<T>>,
    /// Index of this layer's gradient buffer.
    pub slot: usize,
}

pub(crate) struct LinearCache<T> {
    x: Mat<T>,
    u: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    pub fn d_in(&self) -> usize {
        self.w0.cols
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut h = matmul_t(x, &self.w0);
        if let Some(ad) = &self.lora {
            let u = matmul_t(x, &ad.a);
            matmul_t_acc(&mut h, &u, &ad.b, ad.scale());
        }
        h
    }

    pub(crate) fn forward_train(&self, x: &Mat<T>) -> (Mat<T>, LinearCache<T>) {
        let mut h = matmul_t(x, &self.w0);
        let u = self.lora.as_ref().map(|ad| {
            let u = matmul_t(x, &ad.a);
            matmul_t_acc(&mut h, &u, &ad.b, ad.scale());
            u
        });
        (h, LinearCache { x: x.clone(), u })
    }

    /// Accumulates adapter gradients (times `weight`) and returns `dL/dx`.
    pub(crate) fn backward(
        &self,
        cache: &LinearCache<T>,
        dh: &Mat<T>,
        grads: &mut [AdapterGrad<T>],
    ) -> Mat<T> {
        let mut dx = matmul(dh, &self.w0);
        if let (Some(ad), Some(u)) = (&self.lora, &cache.u) {
            let s = ad.scale();
            let g = &mut grads[self.slot];
            // dB = s·dHᵀ·U,  dU = s·dH·B,  dA = dUᵀ·X
            matmul_tn_acc(&mut g.b, dh, u, s);
            let mut du = matmul(dh, &ad.b);
            du.scale(s);
            matmul_tn_acc(&mut g.a, &du, &cache.x, T::one());
            let mut extra = matmul(&du, &ad.a);
            std::mem::swap(&mut extra, &mut dx);
            dx.add_assign(&extra);
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            name: self.name.clone(),
            w0: self.w0.cast(),
            lora: self.lora.as_ref().map(|l| l.cast()),
            slot: self.slot,
        }
    }

    pub fn zero_grad(&self) -> AdapterGrad<T> {
        match &self.lora {
            Some(ad) => AdapterGrad {
                a: Mat::zeros(ad.a.rows, ad.a.cols),
                b: Mat::zeros(ad.b.rows, ad.b.cols),
            },
            None => AdapterGrad {
                a: Mat::zeros(0, 0),
                b: Mat::zeros(0, 0),
            },
        }
    }
}
