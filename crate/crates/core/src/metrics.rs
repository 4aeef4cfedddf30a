//! Matting error metrics over the unknown region of a trimap.
//!
//! Mattes are row-major `h x w` slices with values in `[0, 1]`. Gradient and
//! connectivity errors are divided by 1000, the scale at which they are
//! usually tabulated; SAD is reported both raw and divided by 1000.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{shape_err, Result};

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
pub const CONN_THETA: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub sad: f64,
    pub sad_k: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub unknown_pixel_count: usize,
    /// Set when no pixel is fully opaque in both mattes and the
    /// connectivity error fell back to SAD.
    pub conn_fallback: bool,
}

fn check(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize) -> Result<()> {
    let n = h * w;
    if pred.len() != n || gt.len() != n || mask.len() != n {
        return Err(shape_err!(
            "matte sizes {}/{}/{} do not match {}x{}",
            pred.len(),
            gt.len(),
            mask.len(),
            h,
            w
        ));
    }
    Ok(())
}

pub fn sad(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p - g).abs())
        .sum()
}

/// Mean squared error over the mask; zero when the mask is empty.
pub fn mse(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p - g) * (p - g))
        .sum();
    s / count as f64
}

fn gauss(x: f64, sigma: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    Float::exp(-x * x / (2.0 * sigma * sigma)) / (sigma * Float::sqrt(two_pi))
}

fn dgauss(x: f64, sigma: f64) -> f64 {
    -x * gauss(x, sigma) / (sigma * sigma)
}

/// Half width of the Gaussian-derivative filter: the kernel is truncated
/// where the Gaussian falls below 1% of its peak density scale.
pub fn gauss_halfsize(sigma: f64) -> usize {
    let eps = 1e-2;
    let two_pi = 2.0 * core::f64::consts::PI;
    Float::ceil(sigma * Float::sqrt(-2.0 * Float::ln(Float::sqrt(two_pi) * sigma * eps))) as usize
}

/// Horizontal and vertical Gaussian-derivative responses with replicated
/// borders. The 2-d kernel `g(row) * dg(col)` is normalised to unit
/// Frobenius norm and applied as a convolution (flipped).
pub fn gauss_gradient(img: &[f64], h: usize, w: usize, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let hs = gauss_halfsize(sigma) as isize;
    let g: Vec<f64> = (-hs..=hs).map(|u| gauss(u as f64, sigma)).collect();
    let dg: Vec<f64> = (-hs..=hs).map(|v| dgauss(v as f64, sigma)).collect();
    let norm = Float::sqrt(g.iter().map(|a| a * a).sum::<f64>() * dg.iter().map(|b| b * b).sum::<f64>());
    let at = |y: isize, x: isize| img[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    // convolution flips the kernel: out(y, x) = sum k(a, b) img(y - a, x - b)
    let filter = |ky: &[f64], kx: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for (b, kb) in (-hs..=hs).zip(kx) {
                    s += kb * at(y, x - b);
                }
                tmp[y as usize * w + x as usize] = s;
            }
        }
        let tat = |y: isize, x: usize| tmp[(y.clamp(0, h as isize - 1) as usize) * w + x];
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w {
                let mut s = 0.0;
                for (a, ka) in (-hs..=hs).zip(ky) {
                    s += ka * tat(y - a, x);
                }
                out[y as usize * w + x] = s / norm;
            }
        }
        out
    };
    (filter(&g, &dg), filter(&dg, &g))
}

/// Sum over the mask of squared differences of gradient magnitudes, / 1000.
pub fn grad_error(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize, sigma: f64) -> Result<f64> {
    check(pred, gt, mask, h, w)?;
    let amp = |img: &[f64]| {
        let (gx, gy) = gauss_gradient(img, h, w, sigma);
        gx.iter().zip(&gy).map(|(a, b)| Float::sqrt(a * a + b * b)).collect::<Vec<f64>>()
    };
    let (pa, ga) = (amp(pred), amp(gt));
    let s: f64 = (0..h * w).filter(|&i| mask[i]).map(|i| (pa[i] - ga[i]) * (pa[i] - ga[i])).sum();
    Ok(s / 1000.0)
}

/// For every pixel, the largest threshold at which it is still 4-connected
/// to the source (pixels opaque in both mattes) through pixels where both
/// mattes reach the threshold. `None` when there is no source.
pub fn connectivity_levels(pred: &[f64], gt: &[f64], h: usize, w: usize, step: f64) -> Option<Vec<f64>> {
    let source: Vec<usize> = (0..h * w).filter(|&i| pred[i] >= 1.0 && gt[i] >= 1.0).collect();
    if source.is_empty() {
        return None;
    }
    let steps = Float::round(1.0 / step) as usize;
    let mut level = vec![f64::NAN; h * w];
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for i in 0..steps {
        let t = i as f64 * step;
        seen.iter_mut().for_each(|s| *s = false);
        queue.clear();
        for &s in &source {
            seen[s] = true;
            queue.push_back(s);
        }
        while let Some(p) = queue.pop_front() {
            level[p] = t;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && pred[q] >= t && gt[q] >= t {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    Some(level)
}

/// Connectivity error, / 1000. Returns the SAD-based fallback and `true`
/// when no source region exists.
pub fn conn_error(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    step: f64,
    theta: f64,
) -> Result<(f64, bool)> {
    check(pred, gt, mask, h, w)?;
    let Some(level) = connectivity_levels(pred, gt, h, w, step) else {
        return Ok((sad(pred, gt, mask) / 1000.0, true));
    };
    let phi = |a: f64, l: f64| {
        let d = a - l;
        1.0 - if d >= theta { d } else { 0.0 }
    };
    let s: f64 = (0..h * w)
        .filter(|&i| mask[i])
        .map(|i| (phi(pred[i], level[i]) - phi(gt[i], level[i])).abs())
        .sum();
    Ok((s / 1000.0, false))
}

/// All four metrics with the standard constants.
pub fn evaluate(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize) -> Result<MetricReport> {
    check(pred, gt, mask, h, w)?;
    let s = sad(pred, gt, mask);
    let (conn, conn_fallback) = conn_error(pred, gt, mask, h, w, CONN_STEP, CONN_THETA)?;
    Ok(MetricReport {
        sad: s,
        sad_k: s / 1000.0,
        mse: mse(pred, gt, mask),
        grad: grad_error(pred, gt, mask, h, w, GRAD_SIGMA)?,
        conn,
        unknown_pixel_count: mask.iter().filter(|&&m| m).count(),
        conn_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sad_example() {
        let gt = vec![0.5; 150];
        let pred = vec![0.6; 150];
        let mask: Vec<bool> = (0..150).map(|i| i < 100).collect();
        assert!((sad(&pred, &gt, &mask) - 10.0).abs() < 1e-9);
        assert!((mse(&pred, &gt, &mask) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn halfsize_for_default_sigma() {
        assert_eq!(gauss_halfsize(1.4), 4);
    }

    #[test]
    fn identical_mattes_score_zero() {
        let (h, w) = (6, 7);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 17) as f64 / 16.0).collect();
        let mask = vec![true; h * w];
        let r = evaluate(&a, &a, &mask, h, w).unwrap();
        assert_eq!((r.sad, r.mse, r.grad, r.conn), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn no_source_falls_back_to_sad() {
        let gt = vec![0.5; 4];
        let pred = vec![0.7; 4];
        let mask = vec![true; 4];
        let (c, fb) = conn_error(&pred, &gt, &mask, 2, 2, 0.1, 0.15).unwrap();
        assert!(fb);
        assert!((c - 0.8 / 1000.0).abs() < 1e-12);
    }
}
