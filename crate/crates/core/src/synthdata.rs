//! Procedural matting samples: soft foregrounds composited onto textured
//! backgrounds, trimaps by dilation of the fractional band, and on-the-fly
//! augmentation.
//!
//! Images are interleaved RGB bytes, mattes and trimaps single bytes, all
//! row-major. Alpha is stored as `k / 255` so that samples survive an 8-bit
//! round trip unchanged.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;

pub const TRIMAP_BG: u8 = 0;
pub const TRIMAP_UNKNOWN: u8 = 128;
pub const TRIMAP_FG: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MattingSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub trimap: Vec<u8>,
    pub alpha: Vec<u8>,
    pub fg: Vec<u8>,
    pub bg: Vec<u8>,
}

impl MattingSample {
    pub fn alpha_f64(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| a as f64 / 255.0).collect()
    }

    pub fn unknown_mask(&self) -> Vec<bool> {
        self.trimap.iter().map(|&t| is_unknown(t)).collect()
    }

    /// Checks the composition identity and trimap consistency. Returns a
    /// description of the first violation.
    pub fn check_invariants(&self) -> core::result::Result<(), alloc::string::String> {
        let n = self.height * self.width;
        if self.image.len() != 3 * n
            || self.fg.len() != 3 * n
            || self.bg.len() != 3 * n
            || self.alpha.len() != n
            || self.trimap.len() != n
        {
            return Err("buffer sizes do not match the sample extent".into());
        }
        for i in 0..n {
            let a = self.alpha[i] as f64 / 255.0;
            for ch in 0..3 {
                let j = 3 * i + ch;
                let exact = a * self.fg[j] as f64 + (1.0 - a) * self.bg[j] as f64;
                if (self.image[j] as f64 - exact).abs() > 0.5 + 1e-9 {
                    return Err(alloc::format!("composition off at pixel {i}"));
                }
            }
            match self.trimap[i] {
                TRIMAP_FG if self.alpha[i] != 255 => return Err(alloc::format!("foreground pixel {i} not opaque")),
                TRIMAP_BG if self.alpha[i] != 0 => return Err(alloc::format!("background pixel {i} not clear")),
                TRIMAP_FG | TRIMAP_BG | TRIMAP_UNKNOWN => {}
                t => return Err(alloc::format!("trimap value {t} at pixel {i}")),
            }
        }
        Ok(())
    }
}

/// Any value strictly between background and foreground counts as unknown.
pub fn is_unknown(t: u8) -> bool {
    t != TRIMAP_BG && t != TRIMAP_FG
}

fn quantize(a: f64) -> u8 {
    (a.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// A soft foreground: a blob from a few Gaussian bumps plus hair-like
/// strands. With `soft` unset the matte is binary.
pub fn gen_foreground(rng: &mut Rng, height: usize, width: usize, soft: bool) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (height as f64, width as f64);
    let scale = h.min(w);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..3 + rng.below(3))
        .map(|_| {
            let cy = rng.range(0.3, 0.7) * h;
            let cx = rng.range(0.3, 0.7) * w;
            let s = rng.range(0.12, 0.22) * scale;
            (cy, cx, s, rng.range(0.7, 1.0))
        })
        .collect();
    let field = |y: f64, x: f64| -> f64 {
        bumps
            .iter()
            .map(|&(cy, cx, s, a)| a * Float::exp(-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)))
            .sum()
    };
    let thr = 0.5;
    let band = rng.range(0.15, 0.3);
    let mut alpha = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let f = field(y as f64 + 0.5, x as f64 + 0.5);
            alpha[y * width + x] = if soft {
                smoothstep((f - thr) / band + 0.5)
            } else if f >= thr {
                1.0
            } else {
                0.0
            };
        }
    }

    // strands: random walks leaving the blob
    let strands = 4 + rng.below(5);
    for _ in 0..strands {
        let (cy, cx, _, _) = bumps[rng.below(bumps.len())];
        let mut p = (cy, cx);
        let mut dir = rng.range(0.0, 2.0 * core::f64::consts::PI);
        let width_px = rng.range(0.5, 1.2);
        let strength = rng.range(0.5, 0.9);
        let steps = (scale * rng.range(0.4, 0.7)) as usize;
        for _ in 0..steps {
            dir += rng.range(-0.25, 0.25);
            p.0 += Float::sin(dir);
            p.1 += Float::cos(dir);
            let (py, px) = (p.0 as isize, p.1 as isize);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let (y, x) = (py + dy, px + dx);
                    if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                        continue;
                    }
                    let d2 = (y as f64 + 0.5 - p.0).powi(2) + (x as f64 + 0.5 - p.1).powi(2);
                    let v = if soft {
                        strength * Float::exp(-d2 / (2.0 * width_px * width_px))
                    } else if d2 <= 0.25 {
                        1.0
                    } else {
                        0.0
                    };
                    let a = &mut alpha[y as usize * width + x as usize];
                    *a = a.max(v);
                }
            }
        }
    }

    let base: [f64; 3] = [rng.range(40.0, 220.0), rng.range(40.0, 220.0), rng.range(40.0, 220.0)];
    let grad: [f64; 3] = [rng.range(-60.0, 60.0), rng.range(-60.0, 60.0), rng.range(-60.0, 60.0)];
    let freq = rng.range(0.1, 0.4);
    let mut fg = vec![0u8; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let t = y as f64 / h;
            let tex = 20.0 * Float::sin(freq * (x as f64 + 0.7 * y as f64));
            for ch in 0..3 {
                fg[3 * (y * width + x) + ch] = (base[ch] + grad[ch] * t + tex).clamp(0.0, 255.0).round() as u8;
            }
        }
    }
    (fg, alpha.into_iter().map(quantize).collect())
}

/// Gradient, stripes and noise.
pub fn gen_background(rng: &mut Rng, height: usize, width: usize) -> Vec<u8> {
    let c0: [f64; 3] = [rng.range(0.0, 255.0), rng.range(0.0, 255.0), rng.range(0.0, 255.0)];
    let c1: [f64; 3] = [rng.range(0.0, 255.0), rng.range(0.0, 255.0), rng.range(0.0, 255.0)];
    let theta = rng.range(0.0, core::f64::consts::PI);
    let (s, c) = (Float::sin(theta), Float::cos(theta));
    let freq = rng.range(0.05, 0.6);
    let amp = rng.range(0.0, 40.0);
    let noise = rng.range(0.0, 12.0);
    let diag = ((height * height + width * width) as f64).sqrt().max(1.0);
    let mut out = vec![0u8; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 * c + y as f64 * s) / diag + 0.5;
            let stripe = amp * Float::sin(freq * (x as f64 * s - y as f64 * c));
            for ch in 0..3 {
                let v = c0[ch] + (c1[ch] - c0[ch]) * u.clamp(0.0, 1.0) + stripe + noise * rng.normal();
                out[3 * (y * width + x) + ch] = v.clamp(0.0, 255.0).round() as u8;
            }
        }
    }
    out
}

/// `round(alpha * fg + (1 - alpha) * bg)` per channel.
pub fn composite(fg: &[u8], bg: &[u8], alpha: &[f64]) -> Result<Vec<u8>> {
    if fg.len() != bg.len() || fg.len() != 3 * alpha.len() {
        return Err(shape_err!(
            "composite needs 3 bytes per alpha value, got fg {} bg {} alpha {}",
            fg.len(),
            bg.len(),
            alpha.len()
        ));
    }
    Ok(fg
        .iter()
        .zip(bg)
        .enumerate()
        .map(|(j, (&f, &b))| {
            let a = alpha[j / 3];
            (a * f as f64 + (1.0 - a) * b as f64).clamp(0.0, 255.0).round() as u8
        })
        .collect())
}

/// Unknown band: every pixel within Chebyshev distance `radius` of a
/// fractional alpha. Outside it, opaque pixels are foreground and the rest
/// background.
pub fn make_trimap(alpha: &[u8], height: usize, width: usize, radius: i64) -> Result<Vec<u8>> {
    if radius < 0 {
        return Err(config_err!("trimap dilation radius must be non-negative, got {}", radius));
    }
    if alpha.len() != height * width {
        return Err(shape_err!("alpha has {} values for {}x{}", alpha.len(), height, width));
    }
    let r = radius as usize;
    let seed: Vec<bool> = alpha.iter().map(|&a| a != 0 && a != 255).collect();
    // a square structuring element separates into a row pass and a column pass
    let mut rows = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            if seed[y * width + x] {
                for xx in x.saturating_sub(r)..(x + r + 1).min(width) {
                    rows[y * width + xx] = true;
                }
            }
        }
    }
    let mut band = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            if rows[y * width + x] {
                for yy in y.saturating_sub(r)..(y + r + 1).min(height) {
                    band[yy * width + x] = true;
                }
            }
        }
    }
    Ok(alpha
        .iter()
        .zip(&band)
        .map(|(&a, &u)| match (u, a) {
            (true, _) => TRIMAP_UNKNOWN,
            (false, 255) => TRIMAP_FG,
            _ => TRIMAP_BG,
        })
        .collect())
}

/// A complete sample of the given size.
pub fn gen_sample(rng: &mut Rng, height: usize, width: usize, dilation: (i64, i64)) -> Result<MattingSample> {
    let (fg, alpha) = gen_foreground(rng, height, width, true);
    let bg = gen_background(rng, height, width);
    let af: Vec<f64> = alpha.iter().map(|&a| a as f64 / 255.0).collect();
    let image = composite(&fg, &bg, &af)?;
    let r = rng.int_inclusive(dilation.0, dilation.1);
    let trimap = make_trimap(&alpha, height, width, r)?;
    Ok(MattingSample {
        height,
        width,
        image,
        trimap,
        alpha,
        fg,
        bg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// `None` keeps the incoming trimap.
    pub dilation_range: Option<(i64, i64)>,
    /// Probability of centring the crop on an unknown pixel.
    pub center_prob: f64,
}

impl AugmentConfig {
    pub fn desk(crop: usize) -> Self {
        Self {
            crop,
            flip_prob: 0.5,
            scale_range: (0.75, 1.5),
            dilation_range: Some((1, 15)),
            center_prob: 0.5,
        }
    }

    /// Leaves a `size x size` sample untouched.
    pub fn identity(size: usize) -> Self {
        Self {
            crop: size,
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            dilation_range: None,
            center_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(config_err!("invalid scale range {:?}", self.scale_range));
        }
        if self.crop == 0 {
            return Err(config_err!("crop size must be positive"));
        }
        if let Some((a, b)) = self.dilation_range {
            if a < 0 || a > b {
                return Err(config_err!("invalid dilation range {:?}", self.dilation_range));
            }
        }
        Ok(())
    }
}

/// Bilinear resampling (half-pixel centres) of an interleaved image with
/// `ch` channels.
fn resize_bilinear(src: &[f64], h: usize, w: usize, ch: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * ch];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..ch {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * ch + c];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * ow + x) * ch + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn resize_nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = vec![0; oh * ow];
    for y in 0..oh {
        let yy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let xx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out[y * ow + x] = src[yy * w + xx];
        }
    }
    out
}

fn crop_rows(src: &[u8], w: usize, ch: usize, top: usize, left: usize, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * ch);
    for y in top..top + size {
        out.extend_from_slice(&src[(y * w + left) * ch..(y * w + left + size) * ch]);
    }
    out
}

fn flip_rows(src: &mut [u8], w: usize, ch: usize) {
    for row in src.chunks_mut(w * ch) {
        for x in 0..w / 2 {
            for c in 0..ch {
                row.swap(x * ch + c, (w - 1 - x) * ch + c);
            }
        }
    }
}

/// Mirrors a sample left to right.
pub fn flip_horizontal(s: &MattingSample) -> MattingSample {
    let mut out = s.clone();
    let w = s.width;
    flip_rows(&mut out.image, w, 3);
    flip_rows(&mut out.fg, w, 3);
    flip_rows(&mut out.bg, w, 3);
    flip_rows(&mut out.alpha, w, 1);
    flip_rows(&mut out.trimap, w, 1);
    out
}

/// Random scale, crop, flip and trimap dilation. The output is
/// `crop x crop`.
pub fn augment(sample: &MattingSample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<MattingSample> {
    cfg.validate()?;
    let (h, w) = (sample.height, sample.width);
    if h == 0 || w == 0 {
        return Err(shape_err!("cannot augment an empty sample"));
    }
    let (lo, hi) = cfg.scale_range;
    let drawn = if lo == hi { lo } else { rng.range(lo, hi) };
    let min_scale = (cfg.crop as f64 / h as f64).max(cfg.crop as f64 / w as f64);
    let s = drawn.max(min_scale);
    let (oh, ow) = if s == 1.0 {
        (h, w)
    } else {
        (((h as f64 * s).round() as usize).max(cfg.crop), ((w as f64 * s).round() as usize).max(cfg.crop))
    };

    let mut cur = if (oh, ow) == (h, w) {
        sample.clone()
    } else {
        let to_f = |v: &[u8]| v.iter().map(|&b| b as f64).collect::<Vec<f64>>();
        let to_u8 = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 255.0).round() as u8).collect::<Vec<u8>>();
        let fg = to_u8(resize_bilinear(&to_f(&sample.fg), h, w, 3, oh, ow));
        let bg = to_u8(resize_bilinear(&to_f(&sample.bg), h, w, 3, oh, ow));
        let alpha = to_u8(resize_bilinear(&to_f(&sample.alpha), h, w, 1, oh, ow));
        let af: Vec<f64> = alpha.iter().map(|&a| a as f64 / 255.0).collect();
        let image = composite(&fg, &bg, &af)?;
        let mut trimap = resize_nearest(&sample.trimap, h, w, oh, ow);
        for (t, &a) in trimap.iter_mut().zip(&alpha) {
            let consistent = match *t {
                TRIMAP_FG => a == 255,
                TRIMAP_BG => a == 0,
                _ => true,
            };
            if !consistent || is_unknown(*t) {
                *t = TRIMAP_UNKNOWN;
            }
        }
        MattingSample {
            height: oh,
            width: ow,
            image,
            trimap,
            alpha,
            fg,
            bg,
        }
    };

    let c = cfg.crop;
    let (top, left) = {
        let unknown: Vec<usize> = (0..oh * ow).filter(|&i| is_unknown(cur.trimap[i])).collect();
        let centred = cfg.center_prob > 0.0 && rng.bernoulli(cfg.center_prob) && !unknown.is_empty();
        if centred {
            let p = unknown[rng.below(unknown.len())];
            let (py, px) = (p / ow, p % ow);
            (py.saturating_sub(c / 2).min(oh - c), px.saturating_sub(c / 2).min(ow - c))
        } else if (oh, ow) == (c, c) {
            (0, 0)
        } else {
            (rng.below(oh - c + 1), rng.below(ow - c + 1))
        }
    };
    if (oh, ow) != (c, c) {
        cur = MattingSample {
            height: c,
            width: c,
            image: crop_rows(&cur.image, ow, 3, top, left, c),
            trimap: crop_rows(&cur.trimap, ow, 1, top, left, c),
            alpha: crop_rows(&cur.alpha, ow, 1, top, left, c),
            fg: crop_rows(&cur.fg, ow, 3, top, left, c),
            bg: crop_rows(&cur.bg, ow, 3, top, left, c),
        };
    }
    if cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob) {
        cur = flip_horizontal(&cur);
    }
    if let Some((a, b)) = cfg.dilation_range {
        let r = rng.int_inclusive(a, b);
        cur.trimap = make_trimap(&cur.alpha, c, c, r)?;
    }
    Ok(cur)
}

/// Deterministic collection: sample `i` depends only on `(seed, i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub dilation: (i64, i64),
}

impl SyntheticDataset {
    pub fn new(seed: u64, count: usize, size: usize) -> Self {
        Self {
            seed,
            count,
            size,
            dilation: (1, 15),
        }
    }

    pub fn sample(&self, i: usize) -> Result<MattingSample> {
        if i >= self.count {
            return Err(config_err!("sample index {} out of range for {} samples", i, self.count));
        }
        let mut rng = Rng::derive(self.seed, i as u64);
        gen_sample(&mut rng, self.size, self.size, self.dilation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        assert_eq!(composite(&[200, 10, 0], &[100, 20, 5], &[1.0]).unwrap(), vec![200, 10, 0]);
        assert_eq!(composite(&[200, 10, 0], &[100, 20, 5], &[0.0]).unwrap(), vec![100, 20, 5]);
        assert_eq!(composite(&[200, 200, 200], &[100, 100, 100], &[0.5]).unwrap(), vec![150; 3]);
    }

    #[test]
    fn trimap_examples() {
        assert!(make_trimap(&[0; 16], 4, 4, 3).unwrap().iter().all(|&t| t == TRIMAP_BG));
        let binary: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 255 } else { 0 }).collect();
        let t = make_trimap(&binary, 4, 4, 0).unwrap();
        assert!(t.iter().all(|&v| !is_unknown(v)));
        assert!(make_trimap(&binary, 4, 4, -1).is_err());

        let mut a = vec![0u8; 81];
        a[4 * 9 + 4] = 100;
        let t = make_trimap(&a, 9, 9, 2).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (2..=6).contains(&y) && (2..=6).contains(&x);
                assert_eq!(is_unknown(t[y * 9 + x]), inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn hard_foreground_is_binary() {
        let (_, a) = gen_foreground(&mut Rng::new(3), 32, 32, false);
        assert!(a.iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn identity_augment_is_noop() {
        let ds = SyntheticDataset::new(4, 2, 32);
        let s = ds.sample(1).unwrap();
        let out = augment(&s, &AugmentConfig::identity(32), &mut Rng::new(0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn flip_twice_restores() {
        let s = SyntheticDataset::new(5, 1, 16).sample(0).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }
}
