use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn even_dims<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("{} needs even H and W, got {}x{}", what, h, w));
    }
    Ok((n, c, h, w))
}

/// Offsets of the four members of 2x2 window `(oy, ox)` in row-major
/// window order: top-left, top-right, bottom-left, bottom-right.
#[inline]
fn window(w: usize, oy: usize, ox: usize) -> [usize; 4] {
    let tl = 2 * oy * w + 2 * ox;
    [tl, tl + 1, tl + w, tl + w + 1]
}

/// 2x2, stride-2 average pooling. The window sum is accumulated in row-major
/// order and then scaled by 1/4.
pub fn avgpool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = even_dims(x, "avgpool2")?;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let [a, b, cc, d] = window(w, oy, ox);
                out.push((((plane[a] + plane[b]) + plane[cc]) + plane[d]) * quarter);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avgpool2_backward<T: Real>(in_shape: &[usize], gy: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (p, gplane) in gx.chunks_mut(h * w).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gy[(p * ho + oy) * wo + ox] * quarter;
                for i in window(w, oy, ox) {
                    gplane[i] = g;
                }
            }
        }
    }
    gx
}

/// 2x2, stride-2 max pooling. Also returns, per output element, the window
/// position (0..4) of the maximum; ties go to the first position in
/// row-major order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let (n, c, h, w) = even_dims(x, "maxpool2")?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = window(w, oy, ox);
                let mut best = 0;
                for k in 1..4 {
                    if plane[idx[k]] > plane[idx[best]] {
                        best = k;
                    }
                }
                out.push(plane[idx[best]]);
                arg.push(best as u8);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

/// Expands window argmax positions into a full-resolution one-hot map.
pub fn onehot_from_argmax<T: Real>(in_shape: &[usize], argmax: &[u8]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut data = vec![T::zero(); in_shape.iter().product()];
    for (p, plane) in data.chunks_mut(h * w).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let k = argmax[(p * ho + oy) * wo + ox] as usize;
                plane[window(w, oy, ox)[k]] = T::one();
            }
        }
    }
    Tensor::new(in_shape, data).expect("shape preserved")
}

pub fn maxpool2_backward<T: Real>(in_shape: &[usize], argmax: &[u8], gy: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (p * ho + oy) * wo + ox;
                plane[window(w, oy, ox)[argmax[o] as usize]] = gy[o];
            }
        }
    }
    gx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nn2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (plane, oplane) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx];
                for i in window(w2, y, xx) {
                    oplane[i] = v;
                }
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample_nn2_backward<T: Real>(in_shape: &[usize], gy: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let w2 = 2 * w;
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (p, g) in gx.chunks_mut(h * w).enumerate() {
        let gplane = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let [a, b, c, d] = window(w2, y, xx);
                g[y * w + xx] = ((gplane[a] + gplane[b]) + gplane[c]) + gplane[d];
            }
        }
    }
    gx
}

/// Source taps of one output coordinate of x2 bilinear upsampling with
/// half-pixel centres: `src = (o + 0.5) / 2 - 0.5`, clamped to the border.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (num_traits::Float::floor(src) as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn upsample_bilinear2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("bilinear upsampling of an empty plane"));
    }
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (plane, oplane) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                oplane[oy * w2 + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample_bilinear2_backward<T: Real>(in_shape: &[usize], gy: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (p, g) in gx.chunks_mut(h * w).enumerate() {
        let gplane = &gy[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let go = gplane[oy * w2 + ox];
                let (gt, gb) = (go * wy0, go * wy1);
                g[y0 * w + x0] = g[y0 * w + x0] + gt * wx0;
                g[y0 * w + x1] = g[y0 * w + x1] + gt * wx1;
                g[y1 * w + x0] = g[y1 * w + x0] + gb * wx0;
                g[y1 * w + x1] = g[y1 * w + x1] + gb * wx1;
            }
        }
    }
    gx
}

/// Softmax over every non-overlapping `k x k` window of every channel.
pub fn window_softmax<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 {
        return Err(config_err!("window size must be positive"));
    }
    if h % k != 0 || w % k != 0 {
        return Err(shape_err!(
            "window softmax needs H and W divisible by {}, got {}x{}",
            k,
            h,
            w
        ));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, oplane) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for wy in (0..h).step_by(k) {
            for wx in (0..w).step_by(k) {
                let mut m = T::neg_infinity();
                for y in wy..wy + k {
                    for xx in wx..wx + k {
                        m = m.max(plane[y * w + xx]);
                    }
                }
                let mut s = T::zero();
                for y in wy..wy + k {
                    for xx in wx..wx + k {
                        let e = (plane[y * w + xx] - m).exp();
                        oplane[y * w + xx] = e;
                        s = s + e;
                    }
                }
                let inv = T::one() / s;
                for y in wy..wy + k {
                    for xx in wx..wx + k {
                        oplane[y * w + xx] = oplane[y * w + xx] * inv;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of [`window_softmax`] given its output `y`.
pub fn window_softmax_backward<T: Real>(y: &Tensor<T>, k: usize, gy: &[T]) -> Vec<T> {
    let (h, w) = (y.shape()[2], y.shape()[3]);
    let mut gx = vec![T::zero(); y.len()];
    for (p, gplane) in gx.chunks_mut(h * w).enumerate() {
        let yp = &y.data()[p * h * w..(p + 1) * h * w];
        let gp = &gy[p * h * w..(p + 1) * h * w];
        for wy in (0..h).step_by(k) {
            for wx in (0..w).step_by(k) {
                let mut dot = T::zero();
                for yy in wy..wy + k {
                    for xx in wx..wx + k {
                        dot = dot + gp[yy * w + xx] * yp[yy * w + xx];
                    }
                }
                for yy in wy..wy + k {
                    for xx in wx..wx + k {
                        let i = yy * w + xx;
                        gplane[i] = yp[i] * (gp[i] - dot);
                    }
                }
            }
        }
    }
    gx
}

/// Depth-to-space: `[N, C*r*r, H, W] -> [N, C, rH, rW]`, where channel
/// `c*r*r + i*r + j` fills offset `(i, j)` of every `r x r` output block.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, cr, h, w) = x.dims4()?;
    if r == 0 {
        return Err(config_err!("shuffle factor must be positive"));
    }
    if cr % (r * r) != 0 {
        return Err(shape_err!(
            "pixel shuffle needs channels divisible by r^2 = {}, got {}",
            r * r,
            cr
        ));
    }
    let c = cr / (r * r);
    let (h2, w2) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = ((b * cr + ch * r * r + i * r + j) * h) * w;
                    let dst = (b * c + ch) * h2 * w2;
                    for y in 0..h {
                        for xx in 0..w {
                            out[dst + (y * r + i) * w2 + xx * r + j] = xd[src + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = x.dims4()?;
    if r == 0 {
        return Err(config_err!("shuffle factor must be positive"));
    }
    if h2 % r != 0 || w2 % r != 0 {
        return Err(shape_err!(
            "pixel unshuffle needs H and W divisible by {}, got {}x{}",
            r,
            h2,
            w2
        ));
    }
    let (h, w) = (h2 / r, w2 / r);
    let cr = c * r * r;
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst = ((b * cr + ch * r * r + i * r + j) * h) * w;
                    let src = (b * c + ch) * h2 * w2;
                    for y in 0..h {
                        for xx in 0..w {
                            out[dst + y * w + xx] = xd[src + (y * r + i) * w2 + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cr, h, w], out)
}

/// Zero-pads the bottom and right edges up to `h x w`.
pub fn pad2d<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if h < xh || w < xw {
        return Err(shape_err!("cannot pad {}x{} down to {}x{}", xh, xw, h, w));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, oplane) in x.data().chunks(xh * xw).zip(out.chunks_mut(h * w)) {
        for y in 0..xh {
            oplane[y * w..y * w + xw].copy_from_slice(&plane[y * xw..(y + 1) * xw]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Keeps the top-left `h x w` region.
pub fn crop2d<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if h > xh || w > xw {
        return Err(shape_err!("cannot crop {}x{} to {}x{}", xh, xw, h, w));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(xh * xw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * xw..y * xw + w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Mean over `H, W`, producing `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Real>(in_shape: &[usize], gy: &[T]) -> Vec<T> {
    let hw = in_shape[2] * in_shape[3];
    let inv = T::one() / T::from_f64(hw as f64);
    gy.iter().flat_map(|&g| core::iter::repeat(g * inv).take(hw)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_single_window() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2(&x).unwrap().data(), &[2.5]);
        let (m, arg) = maxpool2(&x).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let oh = onehot_from_argmax::<f64>(x.shape(), &arg);
        assert_eq!(oh.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 7.0);
        let (_, arg) = maxpool2(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn constant_avgpool_is_constant() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 6], 1.25);
        assert!(avgpool2(&x).unwrap().data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(avgpool2(&x).is_err());
        assert!(maxpool2(&x).is_err());
        assert!(window_softmax(&x, 2).is_err());
    }

    #[test]
    fn nearest_upsampling_then_avgpool_is_identity() {
        let mut rng = crate::Rng::new(5);
        let x = Tensor::<f64>::from_fn(&[2, 3, 3, 5], |_| rng.normal());
        let up = upsample_nn2(&x).unwrap();
        assert_eq!(up.shape(), &[2, 3, 6, 10]);
        assert_eq!(avgpool2(&up).unwrap(), x);
        let single = Tensor::<f32>::full(&[1, 1, 1, 1], 3.0);
        assert_eq!(upsample_nn2(&single).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn bilinear_preserves_constants_and_interior_ramps() {
        let c = Tensor::<f64>::full(&[1, 1, 3, 4], 0.7);
        let up = upsample_bilinear2(&c).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // x[i, j] = 2i + 3j; at output (oy, ox) the half-pixel source is
        // ((oy + 0.5) / 2 - 0.5, (ox + 0.5) / 2 - 0.5).
        let (h, w) = (4usize, 5usize);
        let ramp = Tensor::<f64>::from_fn(&[1, 1, h, w], |i| 2.0 * (i / w) as f64 + 3.0 * (i % w) as f64);
        let up = upsample_bilinear2(&ramp).unwrap();
        for oy in 1..2 * h - 1 {
            for ox in 1..2 * w - 1 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let want = 2.0 * sy + 3.0 * sx;
                assert!((up.at4(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_window_hand_values() {
        let ln2 = core::f64::consts::LN_2;
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.0, ln2, 0.0, 0.0]).unwrap();
        let y = window_softmax(&x, 2).unwrap();
        let want = [0.2, 0.4, 0.2, 0.2];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let eq = Tensor::<f32>::full(&[1, 2, 4, 4], 3.0);
        assert!(window_softmax(&eq, 2).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shuffle_layout_is_row_major() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 5], |i| i as f32);
        let p = pad2d(&x, 4, 8).unwrap();
        assert_eq!(p.shape(), &[1, 2, 4, 8]);
        assert_eq!(crop2d(&p, 3, 5).unwrap(), x);
    }
}
