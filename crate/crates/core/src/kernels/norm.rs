use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics observed on a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the convention used for running estimates.
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Present in training mode only.
    pub batch: Option<BnStats<T>>,
}

/// Batch normalisation over the `N, H, W` axes of an `N, C, H, W` tensor.
///
/// Training mode normalises with batch statistics; evaluation mode uses the
/// supplied running mean and variance.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    train: bool,
    eps: T,
) -> Result<BatchNormOutput<T>> {
    if !(eps > T::zero()) {
        return Err(config_err!("batch norm eps must be positive, got {:?}", eps));
    }
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "batch norm affine parameters have lengths {}/{} for C={}",
            gamma.len(),
            beta.len(),
            c
        ));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(shape_err!("batch norm running statistics do not match C={}", c));
    }
    let hw = h * w;
    let m = n * hw;
    if train && m < 2 {
        return Err(shape_err!(
            "training-mode batch norm needs more than one value per channel, got N*H*W = {}",
            m
        ));
    }
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if train {
        let inv_m = T::one() / T::from_f64(m as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                s = s + xd[off..off + hw].iter().copied().sum::<T>();
            }
            let mu = s * inv_m;
            let mut ss = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for &v in &xd[off..off + hw] {
                    let d = v - mu;
                    ss = ss + d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = ss * inv_m;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let batch = train.then(|| {
        let unbias = T::from_f64(m as f64 / (m as f64 - 1.0));
        BnStats {
            mean,
            var: var.iter().map(|&v| v * unbias).collect(),
        }
    });
    Ok(BatchNormOutput {
        y: Tensor::new(x.shape(), y)?,
        xhat,
        inv_std,
        batch,
    })
}

/// Returns `(d x, d gamma, d beta)`.
pub fn batchnorm_backward<T: Real>(
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    gy: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_f64((n * hw) as f64);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                gbeta[ch] = gbeta[ch] + gy[i];
                ggamma[ch] = ggamma[ch] + gy[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            if train {
                let k = scale / m;
                for i in off..off + hw {
                    gx[i] = k * (m * gy[i] - gbeta[ch] - xhat[i] * ggamma[ch]);
                }
            } else {
                for i in off..off + hw {
                    gx[i] = scale * gy[i];
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}
