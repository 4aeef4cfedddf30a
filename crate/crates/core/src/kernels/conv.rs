use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// `floor((input + 2 * padding - kernel) / stride) + 1`.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(config_err!("convolution stride must be positive"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(shape_err!(
            "kernel extent {} does not fit padded input extent {}",
            kernel,
            padded
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

// Upper bound on the number of elements in one im2col tile.
const COL_BUDGET: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn new(x: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let [n, ci, h, w] = *x else {
            return Err(shape_err!("conv2d input must be N,C,H,W, got {:?}", x));
        };
        let [co, cig, kh, kw] = *weight else {
            return Err(shape_err!("conv2d weight must be Co,Ci/g,kh,kw, got {:?}", weight));
        };
        let groups = spec.groups;
        if groups == 0 {
            return Err(config_err!("conv2d groups must be positive"));
        }
        if ci % groups != 0 {
            return Err(config_err!(
                "input channels C={} not divisible by groups={}",
                ci,
                groups
            ));
        }
        if co % groups != 0 {
            return Err(config_err!(
                "output channels Co={} not divisible by groups={}",
                co,
                groups
            ));
        }
        if cig != ci / groups {
            return Err(config_err!(
                "weight input-channel dimension is {} but C/groups = {}/{} = {}",
                cig,
                ci,
                groups,
                ci / groups
            ));
        }
        let ho = conv_out_dim(h, kh, spec.stride, spec.padding)
            .map_err(|e| shape_err!("height: {}", e))?;
        let wo = conv_out_dim(w, kw, spec.stride, spec.padding)
            .map_err(|e| shape_err!("width: {}", e))?;
        Ok(Self {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
            groups,
        })
    }

    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    fn k(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn tile(&self) -> usize {
        (COL_BUDGET / self.k().max(1)).clamp(1, self.pixels().max(1))
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`, i.e. the
    /// `ox` for which `ox * stride + kx - pad` lands inside `0..w`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Visits the output-row segments of pixels `p0 .. p0 + t` as
    /// `(oy, ox_start, ox_end, offset_in_tile)`.
    fn segments(&self, p0: usize, t: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let wo = self.wo;
        let mut p = p0;
        while p < p0 + t {
            let (oy, ox0) = (p / wo, p % wo);
            let ox1 = wo.min(ox0 + (p0 + t - p));
            f(oy, ox0, ox1, p - p0);
            p += ox1 - ox0;
        }
    }

    fn depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1 && !self.pointwise()
    }

    /// Direct single-channel correlation: `y += x (*) w` over one plane.
    fn correlate_plane<T: Real>(&self, x: &[T], wk: &[T], y: &mut [T]) {
        let (h, w, wo, s, pad) = (self.h, self.w, self.wo, self.stride, self.pad);
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let wv = wk[ky * self.kw + kx];
                let (lo, hi) = self.valid_cols(kx);
                for oy in 0..self.ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h || lo >= hi {
                        continue;
                    }
                    let src = &x[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut y[oy * wo + lo..oy * wo + hi];
                    let ix0 = lo * s + kx - pad;
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = *d + wv * src[ix0 + i * s];
                    }
                }
            }
        }
    }

    /// Gradients of [`Geometry::correlate_plane`] for one plane.
    fn correlate_plane_backward<T: Real>(&self, x: &[T], wk: &[T], gy: &[T], gx: Option<&mut [T]>, gw: &mut [T]) {
        let (h, w, wo, s, pad) = (self.h, self.w, self.wo, self.stride, self.pad);
        let mut gx = gx;
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let wv = wk[ky * self.kw + kx];
                let (lo, hi) = self.valid_cols(kx);
                let mut acc = T::zero();
                for oy in 0..self.ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h || lo >= hi {
                        continue;
                    }
                    let row = iy as usize * w;
                    let g = &gy[oy * wo + lo..oy * wo + hi];
                    let ix0 = row + lo * s + kx - pad;
                    for (i, &gv) in g.iter().enumerate() {
                        acc = acc + gv * x[ix0 + i * s];
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        for (i, &gv) in g.iter().enumerate() {
                            let d = &mut gx[ix0 + i * s];
                            *d = *d + gv * wv;
                        }
                    }
                }
                gw[ky * self.kw + kx] = gw[ky * self.kw + kx] + acc;
            }
        }
    }

    /// Fills `col` (`K x t`, row-major) with the receptive fields of output
    /// pixels `p0 .. p0 + t` for one image and group.
    fn im2col<T: Real>(&self, xg: &[T], p0: usize, t: usize, col: &mut [T]) {
        let (h, w, s, pad) = (self.h, self.w, self.stride, self.pad);
        let mut r = 0;
        for c in 0..self.cig() {
            let plane = &xg[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[r * t..(r + 1) * t];
                    let (vlo, vhi) = self.valid_cols(kx);
                    self.segments(p0, t, |oy, a, b, off| {
                        let dst = &mut row[off..off + (b - a)];
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            dst.fill(T::zero());
                            return;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = (vlo.clamp(a, b), vhi.clamp(a, b));
                        dst[..lo - a].fill(T::zero());
                        dst[hi - a..].fill(T::zero());
                        if lo < hi {
                            let ix0 = lo * s + kx - pad;
                            let d = &mut dst[lo - a..hi - a];
                            if s == 1 {
                                d.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                            } else {
                                for (i, v) in d.iter_mut().enumerate() {
                                    *v = src[ix0 + i * s];
                                }
                            }
                        }
                    });
                    r += 1;
                }
            }
        }
    }

    /// Scatter-adds a `K x t` column gradient back onto the input plane.
    fn col2im<T: Real>(&self, col: &[T], p0: usize, t: usize, gxg: &mut [T]) {
        let (h, w, s, pad) = (self.h, self.w, self.stride, self.pad);
        let mut r = 0;
        for c in 0..self.cig() {
            let plane = &mut gxg[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[r * t..(r + 1) * t];
                    let (vlo, vhi) = self.valid_cols(kx);
                    self.segments(p0, t, |oy, a, b, off| {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            return;
                        }
                        let (lo, hi) = (vlo.clamp(a, b), vhi.clamp(a, b));
                        if lo >= hi {
                            return;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let ix0 = lo * s + kx - pad;
                        let src = &row[off + lo - a..off + hi - a];
                        if s == 1 {
                            for (d, &g) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                                *d = *d + g;
                            }
                        } else {
                            for (i, &g) in src.iter().enumerate() {
                                let d = &mut dst[ix0 + i * s];
                                *d = *d + g;
                            }
                        }
                    });
                    r += 1;
                }
            }
        }
    }
}

/// Cross-correlation of `x` with `weight`, plus optional per-channel bias.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(shape_err!(
                "conv2d bias must have shape [{}], got {:?}",
                g.co,
                b.shape()
            ));
        }
    }
    let (k, cig, cog, p) = (g.k(), g.cig(), g.cog(), g.pixels());
    let hw = g.h * g.w;
    let tile = g.tile();
    let mut y = vec![T::zero(); g.n * g.co * p];
    let (xd, wd) = (x.data(), weight.data());
    if g.depthwise() {
        for (i, plane) in y.chunks_mut(p).enumerate() {
            let c = i % g.co;
            g.correlate_plane(&xd[i * hw..(i + 1) * hw], &wd[c * k..(c + 1) * k], plane);
        }
    }
    let mut col = if g.pointwise() || g.depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * tile]
    };
    // depthwise layers were handled above
    let gemm_images = if g.depthwise() { 0 } else { g.n };
    for n in 0..gemm_images {
        for grp in 0..g.groups {
            let xg = &xd[(n * g.ci + grp * cig) * hw..(n * g.ci + (grp + 1) * cig) * hw];
            let wg = &wd[grp * cog * k..(grp + 1) * cog * k];
            let yoff = (n * g.co + grp * cog) * p;
            let mut p0 = 0;
            while p0 < p {
                let t = tile.min(p - p0);
                let (b, rsb): (&[T], usize) = if g.pointwise() {
                    (&xg[p0..], hw)
                } else {
                    g.im2col(xg, p0, t, &mut col[..k * t]);
                    (&col[..k * t], t)
                };
                T::gemm(
                    cog,
                    k,
                    t,
                    T::one(),
                    wg,
                    k,
                    1,
                    b,
                    rsb,
                    1,
                    T::zero(),
                    &mut y[yoff + p0..],
                    p,
                    1,
                );
                p0 += t;
            }
        }
    }
    if let Some(b) = bias {
        for (i, plane) in y.chunks_mut(p).enumerate() {
            let bv = b.data()[i % g.co];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::new(&[g.n, g.co, g.ho, g.wo], y)
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
///
/// The input gradient is skipped (returned empty) when `need_input_grad`
/// is false.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
    gy: &[T],
    need_input_grad: bool,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    let (k, cig, cog, p) = (g.k(), g.cig(), g.cog(), g.pixels());
    let hw = g.h * g.w;
    let tile = g.tile();
    if gy.len() != g.n * g.co * p {
        return Err(shape_err!("conv2d output gradient has wrong length"));
    }
    let mut gx = if need_input_grad {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.co];
    let (xd, wd) = (x.data(), weight.data());
    if g.depthwise() {
        for i in 0..g.n * g.co {
            let c = i % g.co;
            let gxp = if need_input_grad { Some(&mut gx[i * hw..(i + 1) * hw]) } else { None };
            g.correlate_plane_backward(
                &xd[i * hw..(i + 1) * hw],
                &wd[c * k..(c + 1) * k],
                &gy[i * p..(i + 1) * p],
                gxp,
                &mut gw[c * k..(c + 1) * k],
            );
        }
    }
    let mut col = if g.pointwise() || g.depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * tile]
    };
    let mut gcol = if g.pointwise() || g.depthwise() || !need_input_grad {
        Vec::new()
    } else {
        vec![T::zero(); k * tile]
    };
    // depthwise layers were handled above
    let gemm_images = if g.depthwise() { 0 } else { g.n };
    for n in 0..gemm_images {
        for grp in 0..g.groups {
            let xoff = (n * g.ci + grp * cig) * hw;
            let xg = &xd[xoff..xoff + cig * hw];
            let wg = &wd[grp * cog * k..(grp + 1) * cog * k];
            let gwg = &mut gw[grp * cog * k..(grp + 1) * cog * k];
            let yoff = (n * g.co + grp * cog) * p;
            let mut p0 = 0;
            while p0 < p {
                let t = tile.min(p - p0);
                let gy_tile = &gy[yoff + p0..];
                let (b, csb): (&[T], usize) = if g.pointwise() {
                    (&xg[p0..], hw)
                } else {
                    g.im2col(xg, p0, t, &mut col[..k * t]);
                    (&col[..k * t], t)
                };
                // d weight += d y (cog x t) @ col^T (t x K)
                T::gemm(cog, t, k, T::one(), gy_tile, p, 1, b, 1, csb, T::one(), gwg, k, 1);
                if need_input_grad {
                    // d col = weight^T (K x cog) @ d y (cog x t)
                    if g.pointwise() {
                        T::gemm(
                            k,
                            cog,
                            t,
                            T::one(),
                            wg,
                            1,
                            k,
                            gy_tile,
                            p,
                            1,
                            T::one(),
                            &mut gx[xoff + p0..],
                            hw,
                            1,
                        );
                    } else {
                        T::gemm(
                            k,
                            cog,
                            t,
                            T::one(),
                            wg,
                            1,
                            k,
                            gy_tile,
                            p,
                            1,
                            T::zero(),
                            &mut gcol[..k * t],
                            t,
                            1,
                        );
                        g.col2im(&gcol[..k * t], p0, t, &mut gx[xoff..xoff + cig * hw]);
                    }
                }
                p0 += t;
            }
        }
    }
    for (i, plane) in gy.chunks(p).enumerate() {
        let c = i % g.co;
        gb[c] = gb[c] + plane.iter().copied().sum::<T>();
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Tensor<T> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, cig, kh, kw) = w.dims4().unwrap();
        let ho = conv_out_dim(h, kh, spec.stride, spec.padding).unwrap();
        let wo = conv_out_dim(wd, kw, spec.stride, spec.padding).unwrap();
        let cog = co / spec.groups;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                let grp = o / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for c in 0..cig {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                        continue;
                                    }
                                    acc = acc
                                        + x.at4(b, grp * cig + c, iy as usize, ix as usize)
                                            * w.at4(o, c, ky, kx);
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let _ = ci;
        out
    }

    #[test]
    fn all_ones_stride_two() {
        let x = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        let y = conv2d_forward(&x, &w, None, Conv2dSpec::new(2, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), Conv2dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = crate::Rng::new(3);
        for &(spec, ci, co, k) in &[
            (Conv2dSpec::new(1, 1, 1), 3, 4, 3),
            (Conv2dSpec::new(2, 0, 1), 3, 4, 2),
            (Conv2dSpec::new(2, 1, 2), 4, 6, 4),
            (Conv2dSpec::new(2, 0, 4), 4, 4, 2),
            (Conv2dSpec::new(1, 0, 1), 5, 2, 1),
            (Conv2dSpec::new(2, 1, 3), 3, 3, 4),
            (Conv2dSpec::new(1, 1, 2), 2, 2, 3),
        ] {
            let x = Tensor::<f64>::from_fn(&[2, ci, 6, 6], |_| rng.normal());
            let w = Tensor::<f64>::from_fn(&[co, ci / spec.groups, k, k], |_| rng.normal());
            let y = conv2d_forward(&x, &w, None, spec).unwrap();
            let r = naive(&x, &w, spec);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12, "{:?}", spec);
        }
    }

    #[test]
    fn partial_tiles_match_whole_tile() {
        let mut rng = crate::Rng::new(9);
        for &(spec, k, h, w) in &[
            (Conv2dSpec::new(1, 1, 1), 3, 5, 7),
            (Conv2dSpec::new(2, 1, 1), 4, 7, 6),
            (Conv2dSpec::new(2, 0, 1), 2, 6, 8),
            (Conv2dSpec::new(1, 2, 1), 3, 3, 4),
        ] {
            let g = Geometry::new(&[1, 2, h, w], &[1, 2, k, k], spec).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.normal()).collect();
            let (kk, p) = (g.k(), g.pixels());
            let mut whole = vec![0.0; kk * p];
            g.im2col(&x, 0, p, &mut whole);
            for t in 1..p {
                let mut p0 = 0;
                let mut gx = vec![0.0; x.len()];
                let mut gx_whole = vec![0.0; x.len()];
                g.col2im(&whole, 0, p, &mut gx_whole);
                while p0 < p {
                    let n = t.min(p - p0);
                    let mut part = vec![f64::NAN; kk * n];
                    g.im2col(&x, p0, n, &mut part);
                    for r in 0..kk {
                        assert_eq!(&part[r * n..(r + 1) * n], &whole[r * p + p0..r * p + p0 + n]);
                    }
                    g.col2im(&part, p0, n, &mut gx);
                    p0 += n;
                }
                assert_eq!(gx, gx_whole, "{:?} tile {}", spec, t);
            }
        }
    }

    #[test]
    fn input_gradient_is_adjoint() {
        let mut rng = crate::Rng::new(5);
        for &(spec, ci, co, k) in &[
            (Conv2dSpec::new(1, 1, 1), 3, 4, 3),
            (Conv2dSpec::new(2, 1, 2), 4, 6, 4),
            (Conv2dSpec::new(1, 0, 1), 5, 2, 1),
            (Conv2dSpec::new(2, 1, 3), 3, 3, 4),
            (Conv2dSpec::new(2, 0, 4), 4, 4, 2),
        ] {
            let x = Tensor::<f64>::from_fn(&[2, ci, 7, 5], |_| rng.normal());
            let w = Tensor::<f64>::from_fn(&[co, ci / spec.groups, k, k], |_| rng.normal());
            let y = conv2d_forward(&x, &w, None, spec).unwrap();
            let gy: Vec<f64> = (0..y.len()).map(|_| rng.normal()).collect();
            let (gx, gw, _) = conv2d_backward(&x, &w, spec, &gy, true).unwrap();
            let lhs: f64 = y.data().iter().zip(&gy).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(&gx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn group_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 1, 2, 2]);
        let err = conv2d_forward(&x, &w, None, Conv2dSpec::new(2, 0, 2)).unwrap_err();
        assert!(alloc::format!("{}", err).contains("C=3"));
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, Conv2dSpec::default()).is_err());
    }
}
