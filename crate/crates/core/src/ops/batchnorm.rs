//! 2D batch normalization with explicit running-state threading: training
//! mode returns the new running statistics instead of mutating anything.

use crate::error::{CoreError, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values backward needs; `mean`/`inv_std` are whichever statistics the
/// forward actually used.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Updated running statistics produced by a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    training: bool,
) -> Result<(Tensor<T>, BnCache<T>, Option<BnUpdate<T>>)> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(CoreError::shape(
            "batchnorm2d",
            format!("parameter length does not match {c} channels"),
        ));
    }
    let m = (n * h * w) as f64;
    let eps = T::from_fp(BN_EPS);

    let (mean, var) = if training {
        let stats: Vec<(T, T)> = par::map_collect(c, |ci| {
            let mut sum = T::zero();
            for ni in 0..n {
                for &v in x.plane(ni, ci) {
                    sum += v;
                }
            }
            let mu = sum / T::from_fp(m);
            let mut sq = T::zero();
            for ni in 0..n {
                for &v in x.plane(ni, ci) {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            (mu, sq / T::from_fp(m))
        });
        (
            stats.iter().map(|s| s.0).collect::<Vec<_>>(),
            stats.iter().map(|s| s.1).collect::<Vec<_>>(),
        )
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut y = x.clone();
    let hw = h * w;
    par::for_each_chunk_mut(y.data_mut(), hw, |plane_idx, plane| {
        let ci = plane_idx % c;
        let (mu, inv, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        for v in plane.iter_mut() {
            *v = (*v - mu) * inv * g + b;
        }
    });

    let update = training.then(|| {
        let mom = T::from_fp(BN_MOMENTUM);
        BnUpdate {
            mean: running_mean
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| r * (T::one() - mom) + b * mom)
                .collect(),
            var: running_var
                .iter()
                .zip(&var)
                .map(|(&r, &b)| r * (T::one() - mom) + b * mom)
                .collect(),
        }
    });

    Ok((y, BnCache { mean, inv_std, training }, update))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    assert_eq!(dy.shape(), x.shape());
    let m = T::from_fp((n * h * w) as f64);

    // per-channel reductions: sum(dy), sum(dy * xhat)
    let sums: Vec<(T, T)> = par::map_collect(c, |ci| {
        let (mu, inv) = (cache.mean[ci], cache.inv_std[ci]);
        let mut s_dy = T::zero();
        let mut s_dyx = T::zero();
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let gp = dy.plane(ni, ci);
            for (&xv, &gv) in xp.iter().zip(gp) {
                s_dy += gv;
                s_dyx += gv * (xv - mu) * inv;
            }
        }
        (s_dy, s_dyx)
    });

    let mut dx = dy.clone();
    let hw = h * w;
    par::for_each_chunk_mut(dx.data_mut(), hw, |plane_idx, plane| {
        let (ni, ci) = (plane_idx / c, plane_idx % c);
        let (mu, inv, g) = (cache.mean[ci], cache.inv_std[ci], gamma[ci]);
        let (s_dy, s_dyx) = sums[ci];
        let xp = x.plane(ni, ci);
        if cache.training {
            for (gv, &xv) in plane.iter_mut().zip(xp) {
                let xhat = (xv - mu) * inv;
                *gv = g * inv * (*gv - s_dy / m - xhat * s_dyx / m);
            }
        } else {
            for gv in plane.iter_mut() {
                *gv = *gv * g * inv;
            }
        }
    });

    let dgamma = sums.iter().map(|s| s.1).collect();
    let dbeta = sums.iter().map(|s| s.0).collect();
    (dx, dgamma, dbeta)
}
