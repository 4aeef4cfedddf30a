//! Indexed pooling and indexed upsampling.
//!
//! Pooling computes, for every `2x2` window `E`, `sum_{x in E} I(x) x`. It is
//! evaluated as `4 * avgpool2(x * I)`, which reuses the pooling kernel and is
//! bitwise equal to the direct sum because scaling by `0.25` and then `4` is
//! exact in binary floating point. Upsampling is `I * nn_upsample(d)`.
//!
//! Holistic maps have one channel and broadcast over the feature channels.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::indexfn::{index_max, LocalRegion};
use crate::kernels;
use crate::ops::Ops;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index maps retained from an encoder stage for its decoder stage.
#[derive(Clone, Debug)]
pub struct PoolingContext<V> {
    pub encoder: V,
    pub decoder: V,
    /// `[N, C, H, W]` of the feature map before pooling.
    pub input_shape: [usize; 4],
}

fn check_map(x: &[usize], map: &[usize]) -> Result<()> {
    let ok = x.len() == 4
        && map.len() == 4
        && map[0] == x[0]
        && (map[1] == x[1] || map[1] == 1)
        && map[2] == x[2]
        && map[3] == x[3];
    if !ok {
        return Err(shape_err!("index map {:?} does not fit feature map {:?}", map, x));
    }
    Ok(())
}

pub fn indexed_pool<T: Real, B: Ops<T>>(b: &mut B, x: &B::V, encoder_map: &B::V) -> Result<B::V> {
    check_map(b.shape(x), b.shape(encoder_map))?;
    let weighted = b.mul(x, encoder_map)?;
    let pooled = b.avgpool2(&weighted)?;
    Ok(b.scalar_mul(&pooled, T::from_f64(4.0)))
}

pub fn indexed_upsample<T: Real, B: Ops<T>>(b: &mut B, d: &B::V, decoder_map: &B::V) -> Result<B::V> {
    let (ds, ms) = (b.shape(d), b.shape(decoder_map));
    if ds.len() != 4 || ms.len() != 4 {
        return Err(shape_err!("indexed upsampling needs 4-d inputs, got {:?} and {:?}", ds, ms));
    }
    check_map(&[ds[0], ds[1], 2 * ds[2], 2 * ds[3]], ms)?;
    let up = b.upsample_nn2(d)?;
    b.mul(decoder_map, &up)
}

/// Direct evaluation of `sum_{x in E} I(x) x` in row-major window order.
pub fn indexed_pool_direct<T: Real>(x: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    check_map(x.shape(), map.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let mc = map.shape()[1];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("indexed pooling needs even spatial dims, got {}x{}", h, w));
    }
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    let od = out.data_mut();
    let mut o = 0;
    for bi in 0..n {
        for ch in 0..c {
            let mch = if mc == 1 { 0 } else { ch };
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut acc = T::zero();
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * i + di, 2 * j + dj);
                        acc = acc + x.at4(bi, ch, y, xx) * map.at4(bi, mch, y, xx);
                    }
                    od[o] = acc;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Classical max unpooling: each value goes to its window's argmax.
pub fn max_unpool_scatter<T: Real>(d: &Tensor<T>, argmax: &[u8]) -> Result<Tensor<T>> {
    let (n, c, h, w) = d.dims4()?;
    if argmax.len() != d.len() {
        return Err(shape_err!("{} argmax entries for {} values", argmax.len(), d.len()));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (idx, (&v, &a)) in d.data().iter().zip(argmax).enumerate() {
        let plane = idx / (h * w);
        let (i, j) = ((idx % (h * w)) / w, idx % w);
        let (y, x) = (2 * i + (a as usize) / 2, 2 * j + (a as usize) % 2);
        out.data_mut()[(plane * oh + y) * ow + x] = v;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub cases: usize,
    /// Descriptions of failed checks; empty when everything matched.
    pub failures: Vec<String>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures.is_empty()
    }
}

/// Checks the special cases binding IP/IU to the classical operators on
/// `cases` random feature maps, bitwise at 64-bit. `route_constant` is the
/// multiplier of the pooling route (4 in production; anything else must
/// fail).
pub fn pool_unpool_equivalence_suite(seed: u64, cases: usize, route_constant: f64) -> Result<EquivalenceReport> {
    if cases == 0 {
        return Err(config_err!("equivalence suite needs at least one case"));
    }
    let mut rng = Rng::derive(seed, 0x7375_6974);
    let mut report = EquivalenceReport {
        cases,
        failures: Vec::new(),
    };
    let mut fail = |name: &str, case: usize| report.failures.push(alloc::format!("{name} (case {case})"));
    for case in 0..cases {
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(3);
        let h = 2 * (1 + rng.below(4));
        let w = 2 * (1 + rng.below(4));
        let x = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.normal());
        let mut e = crate::ops::Eager::new();
        let xv = e.constant(x.clone());

        // max one-hot
        let (maxp, argmax) = kernels::maxpool2(&x)?;
        let onehot = e.constant(kernels::onehot_from_argmax(x.shape(), &argmax));
        if *indexed_pool(&mut e, &xv, &onehot)? != maxp {
            fail("IP with max one-hot vs max pooling", case);
        }
        // each one-hot window must agree with the reference indicator
        let mut indicator_ok = true;
        for (win, &a) in argmax.iter().enumerate() {
            let plane = win / ((h / 2) * (w / 2));
            let (i, j) = ((win % ((h / 2) * (w / 2))) / (w / 2), win % (w / 2));
            let vals: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(di, dj)| x.data()[(plane * h + 2 * i + di) * w + 2 * j + dj])
                .collect();
            let m = index_max(&LocalRegion::new(2, vals)?);
            if m[a as usize] != 1.0 {
                indicator_ok = false;
            }
        }
        if !indicator_ok {
            fail("max one-hot vs max indicator", case);
        }

        let d = Tensor::<f64>::from_fn(&[n, c, h / 2, w / 2], |_| rng.normal());
        let dv = e.constant(d.clone());
        if *indexed_upsample(&mut e, &dv, &onehot)? != max_unpool_scatter(&d, &argmax)? {
            fail("IU with max one-hot vs max unpooling", case);
        }

        // uniform and all-ones maps
        let quarter = e.constant(Tensor::full(&[n, 1, h, w], 0.25));
        if *indexed_pool(&mut e, &xv, &quarter)? != kernels::avgpool2(&x)? {
            fail("IP with uniform 1/4 vs average pooling", case);
        }
        let ones = e.constant(Tensor::ones(&[n, c, h, w]));
        if *indexed_upsample(&mut e, &dv, &ones)? != kernels::upsample_nn2(&d)? {
            fail("IU with ones vs nearest neighbour", case);
        }

        // route vs direct sum on a soft map
        let logits = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.normal());
        let soft = kernels::window_softmax(&logits, 2)?;
        let direct = indexed_pool_direct(&x, &soft)?;
        let prod = kernels::binary_forward(kernels::BinaryOp::Mul, &x, &soft)?;
        let route = kernels::avgpool2(&prod)?.map(|v| v * route_constant);
        if route != direct {
            fail("IP route (mul, avgpool, scale) vs direct sum", case);
        }
    }
    Ok(report)
}
