//! Central-difference gradient checking at 64-bit precision.
//!
//! The function under test may return a tensor of any shape. It is reduced
//! to a scalar by a dot product with fixed random weights, which exercises
//! every output element with a distinct cotangent.
//!
//! Piecewise-linear operations (ReLU, max pooling) are not differentiable
//! at their kinks. A probe whose central difference disagrees with the
//! analytic gradient and whose one-sided differences disagree with each
//! other is retried with a smaller step; if it still straddles a kink it
//! is skipped rather than scored.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::Ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor, so that gradients near zero are compared in
    /// absolute terms.
    pub floor: f64,
    /// At most this many coordinates are probed per input; larger inputs
    /// are sampled.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_probes: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub probes: usize,
    /// Probes that straddled a kink at every step tried.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol && self.inputs.iter().all(|r| r.skipped < r.probes)
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

/// Smallest step tried near a kink; below it rounding dominates.
const MIN_STEP: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of `f` with respect to every named input.
///
/// `f` receives one leaf per input (in order) and returns the output node.
/// It is called once for the analytic pass and twice per probed coordinate.
pub fn gradcheck<F>(inputs: &[(&str, Tensor<f64>)], cfg: GradcheckConfig, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if inputs.is_empty() {
        return Err(config_err!("gradcheck needs at least one input"));
    }
    if !(cfg.h > 0.0) || !(cfg.tol > 0.0) || cfg.max_probes == 0 {
        return Err(config_err!("invalid gradcheck settings {:?}", cfg));
    }
    let mut rng = Rng::derive(cfg.seed, 0x6772_6164);

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &leaves)?;
    let weights = Tensor::from_fn(g.value(out).shape(), |_| rng.range(-1.0, 1.0));
    let w = g.constant(weights.clone());
    let prod = g.mul(&out, &w)?;
    let loss = g.sum(&prod);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, (_, t))| g.grad(l).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();
    drop(g);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &leaves)?;
        let y = g.value(out);
        if y.shape() != weights.shape() {
            return Err(config_err!("gradcheck output shape changed under perturbation"));
        }
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let base = eval(&values)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let probes: Vec<usize> = if t.len() <= cfg.max_probes {
            (0..t.len()).collect()
        } else {
            (0..cfg.max_probes).map(|_| rng.below(t.len())).collect()
        };
        let mut report = InputReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            probes: probes.len(),
            skipped: 0,
        };
        for &j in &probes {
            let x0 = t.data()[j];
            let mut h = cfg.h;
            let (err, kinked) = loop {
                values[i].data_mut()[j] = x0 + h;
                let up = eval(&values)?;
                values[i].data_mut()[j] = x0 - h;
                let down = eval(&values)?;
                values[i].data_mut()[j] = x0;
                let numeric = (up - down) / (2.0 * h);
                let err = relative_error(analytic[i][j], numeric, cfg.floor);
                // a kink makes the one-sided slopes differ by at least twice
                // the central difference's distance to either of them
                let jump = ((up - base) / h - (base - down) / h).abs();
                let kinked = err >= cfg.tol && jump >= (analytic[i][j] - numeric).abs();
                if !kinked || h * 0.1 < MIN_STEP {
                    break (err, kinked);
                }
                h *= 0.1;
            };
            if kinked {
                report.skipped += 1;
                continue;
            }
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_index = j;
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        inputs: reports,
        tol: cfg.tol,
    })
}
