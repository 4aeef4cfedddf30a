//! Classical upsampling operators written as index functions over a local
//! region. These are the oracles the learned operators are tested against.
//!
//! Regions are `k x k`, stored row-major. Under this view max unpooling,
//! nearest-neighbour (average) upsampling, bilinear interpolation or
//! deconvolution, and pixel shuffle differ only in the index map they
//! attach to each region.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use crate::kernels::{pixel_shuffle, pixel_unshuffle};

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRegion<T> {
    k: usize,
    values: Vec<T>,
}

impl<T: Real> LocalRegion<T> {
    pub fn new(k: usize, values: Vec<T>) -> Result<Self> {
        if k == 0 || values.is_empty() {
            return Err(config_err!("local region must be non-empty"));
        }
        if values.len() != k * k {
            return Err(shape_err!("a {}x{} region needs {} values, got {}", k, k, k * k, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("local region entries must be finite"));
        }
        Ok(Self { k, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IndexFunctionKind<T> {
    MaxIndicator,
    AvgIndicator,
    /// Soft indices, e.g. a bilinear or deconvolution kernel.
    WeightedIndicator(Vec<T>),
    PixelShuffle(usize),
}

/// One at the first maximum in row-major order, zero elsewhere.
pub fn index_max<T: Real>(region: &LocalRegion<T>) -> Vec<T> {
    let mut best = 0;
    for (i, &v) in region.values.iter().enumerate() {
        if v > region.values[best] {
            best = i;
        }
    }
    let mut out = vec![T::zero(); region.values.len()];
    out[best] = T::one();
    out
}

pub fn index_avg<T: Real>(region: &LocalRegion<T>) -> Vec<T> {
    vec![T::one(); region.values.len()]
}

/// The weighted indicator is the weight itself, independent of the region's
/// values.
pub fn index_weighted<T: Real>(region: &LocalRegion<T>, weights: &[T]) -> Result<Vec<T>> {
    if weights.len() != region.values.len() {
        return Err(shape_err!(
            "weights have {} entries but the region has {}",
            weights.len(),
            region.values.len()
        ));
    }
    Ok(weights.to_vec())
}

/// Evaluates an index function. Pixel shuffle has no per-region form in
/// this sense: its index is the one-hot at position `l` of each `r x r`
/// block, returned here for `l = 0`.
pub fn index_of<T: Real>(kind: &IndexFunctionKind<T>, region: &LocalRegion<T>) -> Result<Vec<T>> {
    match kind {
        IndexFunctionKind::MaxIndicator => Ok(index_max(region)),
        IndexFunctionKind::AvgIndicator => Ok(index_avg(region)),
        IndexFunctionKind::WeightedIndicator(w) => index_weighted(region, w),
        IndexFunctionKind::PixelShuffle(r) => {
            if *r != region.k {
                return Err(config_err!("pixel shuffle factor {} does not match region size {}", r, region.k));
            }
            let mut out = vec![T::zero(); r * r];
            out[0] = T::one();
            Ok(out)
        }
    }
}

/// Index-weighted sum over a region.
pub fn pool_region<T: Real>(region: &LocalRegion<T>, index: &[T]) -> T {
    region.values.iter().zip(index).fold(T::zero(), |acc, (&x, &i)| acc + x * i)
}

/// Spreads one low-resolution value over a region.
pub fn unpool_value<T: Real>(d: T, index: &[T]) -> Vec<T> {
    index.iter().map(|&i| i * d).collect()
}

/// Separable 4x4 kernel of x2 bilinear interpolation (half-pixel centres).
pub fn bilinear_index_weights<T: Real>() -> Vec<T> {
    let t = [0.25, 0.75, 0.75, 0.25];
    let mut w = Vec::with_capacity(16);
    for a in t {
        for b in t {
            w.push(T::from_f64(a * b));
        }
    }
    w
}

/// Upsampling by x2 where every low-resolution value spreads over a 4x4
/// footprint weighted by `weights` (a deconvolution with stride 2 and
/// padding 1). With [`bilinear_index_weights`] this equals bilinear
/// upsampling away from the border.
pub fn weighted_index_upsample<T: Real>(d: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    if weights.len() != 16 {
        return Err(shape_err!("expected a 4x4 weight, got {} entries", weights.len()));
    }
    let (n, c, h, w) = d.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let o = out.data_mut();
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let v = d.data()[(plane * h + i) * w + j];
                for a in 0..4 {
                    let y = (2 * i + a) as isize - 1;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for b in 0..4 {
                        let x = (2 * j + b) as isize - 1;
                        if x < 0 || x >= ow as isize {
                            continue;
                        }
                        let slot = &mut o[(plane * oh + y as usize) * ow + x as usize];
                        *slot = *slot + weights[a * 4 + b] * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::upsample_bilinear2;
    use crate::rng::Rng;

    fn region(v: &[f64]) -> LocalRegion<f64> {
        LocalRegion::new(2, v.to_vec()).unwrap()
    }

    #[test]
    fn max_indicator_examples() {
        assert_eq!(index_max(&region(&[1., 2., 3., 4.])), vec![0., 0., 0., 1.]);
        assert_eq!(index_max(&region(&[7., 7., 7., 7.])), vec![1., 0., 0., 0.]);
    }

    #[test]
    fn empty_region_is_rejected() {
        assert!(LocalRegion::<f64>::new(0, vec![]).is_err());
        assert!(LocalRegion::<f64>::new(2, vec![1.0]).is_err());
    }

    #[test]
    fn max_indicator_matches_argmax() {
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let arg = (0..4).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap();
            let m = index_max(&region(&v));
            assert_eq!(m.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(m[arg], 1.0);
        }
    }

    #[test]
    fn average_indicator_gives_nearest_neighbour() {
        let r = region(&[0.3, 1.0, -2.0, 5.0]);
        let ones = index_avg(&r);
        assert_eq!(ones, vec![1.0; 4]);
        assert_eq!(unpool_value(3.0, &ones), vec![3.0; 4]);
    }

    #[test]
    fn average_indicator_reproduces_avg_pool() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let t = Tensor::new(&[1, 1, 2, 2], v.clone()).unwrap();
            let avg = crate::kernels::avgpool2(&t).unwrap().data()[0];
            let ip = pool_region(&region(&v), &index_avg(&region(&v))) / 4.0;
            assert!((avg - ip).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_indicator_special_cases() {
        let r = region(&[1., 2., 3., 4.]);
        assert_eq!(index_weighted(&r, &[1.0; 4]).unwrap(), index_avg(&r));
        let onehot = [0., 1., 0., 0.];
        assert_eq!(unpool_value(5.0, &index_weighted(&r, &onehot).unwrap()), vec![0., 5., 0., 0.]);
        assert!(index_weighted(&r, &[1.0; 3]).is_err());
    }

    #[test]
    fn bilinear_weights_reproduce_bilinear_upsampling_inside() {
        let mut rng = Rng::new(2);
        let d = Tensor::from_fn(&[1, 2, 5, 6], |_| rng.normal());
        let via_index = weighted_index_upsample(&d, &bilinear_index_weights()).unwrap();
        let bil = upsample_bilinear2(&d).unwrap();
        let (_, c, h, w) = bil.dims4().unwrap();
        for ch in 0..c {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let a = via_index.at4(0, ch, y, x);
                    let b = bil.at4(0, ch, y, x);
                    assert!((a - b).abs() < 1e-12, "({y},{x}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_kind_checks_factor() {
        let r = region(&[1., 2., 3., 4.]);
        assert_eq!(index_of(&IndexFunctionKind::PixelShuffle(2), &r).unwrap(), vec![1., 0., 0., 0.]);
        assert!(index_of(&IndexFunctionKind::PixelShuffle(3), &r).is_err());
    }
}
