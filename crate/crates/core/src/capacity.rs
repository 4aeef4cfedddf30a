//! Window-argmax fitting task for comparing index-block capacity.
//!
//! Each example is a single `2x2` window with `C` channels. Channel `c` holds
//! `(-1)^c a` plus a little noise, where `a` is one shared random window, so
//! the channel-max at each position is close to `|a|`. The target is the
//! position of the largest channel-max, i.e. the hard max index. A linear
//! block sees only signed sums of the channels and cannot represent `|a|`.

use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::graph::Graph;
use crate::indexnet::{build_index_block, index_logits, IndexBlockConfig, IndexFamily};
use crate::layers::{apply_bn_updates, Ctx};
use crate::ops::{Eager, Ops};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapacityConfig {
    pub channels: usize,
    pub noise: f64,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub test_size: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            noise: 0.05,
            batch: 256,
            steps: 2000,
            lr: 1e-2,
            test_size: 4000,
        }
    }
}

/// `n` windows `[n, C, 2, 2]` and their target positions in `0..4`.
pub fn argmax_windows(rng: &mut Rng, n: usize, channels: usize, noise: f64) -> (Tensor<f64>, Vec<usize>) {
    let mut x = Tensor::zeros(&[n, channels, 2, 2]);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let a: [f64; 4] = core::array::from_fn(|_| rng.normal());
        let mut best = [f64::NEG_INFINITY; 4];
        for c in 0..channels {
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            for (p, &ap) in a.iter().enumerate() {
                let v = sign * ap + noise * rng.normal();
                x.data_mut()[(i * channels + c) * 4 + p] = v;
                best[p] = best[p].max(v);
            }
        }
        // first maximum wins ties, as in max pooling
        let mut arg = 0;
        for p in 1..4 {
            if best[p] > best[arg] {
                arg = p;
            }
        }
        y.push(arg);
    }
    (x, y)
}

/// Trains a holistic index block (linear or nonlinear) on the task with a
/// cross-entropy loss on the encoder map and returns test accuracy.
pub fn capacity_run(nonlinear: bool, seed: u64, cfg: &CapacityConfig) -> Result<f64> {
    if cfg.batch == 0 || cfg.test_size == 0 || cfg.channels == 0 {
        return Err(config_err!("capacity task needs positive batch, test size and channels"));
    }
    let icfg = IndexBlockConfig::new(IndexFamily::Holistic, cfg.channels).nonlinear(nonlinear);
    let mut store = ParamStore::<f64>::new();
    let block = build_index_block(&icfg, &mut store, "idx", Init::HeNormal, &mut Rng::derive(seed, 0x696e_6974))?;
    let mut rng = Rng::derive(seed, 0x6461_7461);
    let mut adam = AdamState::new();
    for step in 0..cfg.steps {
        let drops = [0.6, 0.85].iter().filter(|&&f| step >= (f * cfg.steps as f64) as u64).count();
        let lr = cfg.lr * num_traits::Float::powi(0.1f64, drops as i32);
        let (x, y) = argmax_windows(&mut rng, cfg.batch, cfg.channels, cfg.noise);
        let mut target = Tensor::zeros(&[cfg.batch, 1, 2, 2]);
        for (i, &t) in y.iter().enumerate() {
            target.data_mut()[i * 4 + t] = 1.0;
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::train();
        let xv = g.constant(x);
        let logits = index_logits(&mut g, &store, &block, &xv, &mut ctx)?;
        let p = g.window_softmax(&logits, 2)?;
        let logp = g.ln(&p);
        let t = g.constant(target);
        let picked = g.mul(&logp, &t)?;
        let s = g.sum(&picked);
        let loss = g.scalar_mul(&s, -1.0 / cfg.batch as f64);
        g.backward(loss)?;
        let grads = g.param_grads();
        adam_step(&mut store, &grads, &mut adam, lr, AdamConfig::default())?;
        apply_bn_updates(&mut store, &ctx.bn_updates, 0.1);
    }

    let (x, y) = argmax_windows(&mut rng, cfg.test_size, cfg.channels, cfg.noise);
    let mut e = Eager::new();
    let xv = e.constant(x);
    let logits = index_logits(&mut e, &store, &block, &xv, &mut Ctx::eval())?;
    let correct = y
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let w = &logits.data()[i * 4..i * 4 + 4];
            let mut arg = 0;
            for p in 1..4 {
                if w[p] > w[arg] {
                    arg = p;
                }
            }
            arg == t
        })
        .count();
    Ok(correct as f64 / cfg.test_size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_follow_channel_max() {
        let mut rng = Rng::new(1);
        let (x, y) = argmax_windows(&mut rng, 50, 4, 0.0);
        for (i, &t) in y.iter().enumerate() {
            let cm = |p: usize| (0..4).map(|c| x.data()[(i * 4 + c) * 4 + p]).fold(f64::NEG_INFINITY, f64::max);
            assert!((0..4).all(|p| cm(p) <= cm(t)));
        }
    }

    #[test]
    fn short_run_beats_chance() {
        let cfg = CapacityConfig {
            steps: 200,
            test_size: 500,
            ..CapacityConfig::default()
        };
        assert!(capacity_run(true, 0, &cfg).unwrap() > 0.4);
    }
}
