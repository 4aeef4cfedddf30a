use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Result shape of broadcasting two equal-rank shapes over singleton axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!("cannot broadcast rank {} with rank {}", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err!(
                "cannot broadcast {:?} with {:?}: axis {} has extents {} and {}",
                a,
                b,
                axis,
                x,
                y
            )),
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks the broadcast output in row-major order, calling `f(out, ia, ib)`.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let inner = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    loop {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o, ia + j * la, ib + j * lb);
            o += 1;
        }
        // advance the outer counter
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary_forward<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &out, |o, ia, ib| {
        data[o] = op.apply(ad[ia], bd[ib]);
    });
    Tensor::new(&out, data)
}

/// Gradients of a broadcast binary op, reduced back onto each operand's shape.
pub fn binary_backward<T: Real>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let (ad, bd) = (a.data(), b.data());
    let mut step = |o: usize, ia: usize, ib: usize| {
        let g = gy[o];
        match op {
            BinaryOp::Add => {
                ga[ia] = ga[ia] + g;
                gb[ib] = gb[ib] + g;
            }
            BinaryOp::Sub => {
                ga[ia] = ga[ia] + g;
                gb[ib] = gb[ib] - g;
            }
            BinaryOp::Mul => {
                ga[ia] = ga[ia] + g * bd[ib];
                gb[ib] = gb[ib] + g * ad[ia];
            }
        }
    };
    if a.shape() == b.shape() {
        for i in 0..gy.len() {
            step(i, i, i);
        }
    } else {
        let out = broadcast_shape(a.shape(), b.shape()).expect("validated in forward");
        for_each_broadcast(a.shape(), b.shape(), &out, step);
    }
    (ga, gb)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(shape_err!(
                "concat operands disagree outside the channel axis: {:?} vs {:?}",
                first.shape(),
                x.shape()
            ));
        }
        total_c += xc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for x in xs {
            let per = x.shape()[1] * h * w;
            data.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(&[n, total_c, h, w], data)
}

/// Splits a concatenated gradient back into per-operand pieces.
pub fn split_channels_grad<T: Real>(gy: &[T], n: usize, hw: usize, channels: &[usize]) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut out: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
    for b in 0..n {
        let mut off = b * total * hw;
        for (i, &c) in channels.iter().enumerate() {
            out[i].extend_from_slice(&gy[off..off + c * hw]);
            off += c * hw;
        }
    }
    out
}

/// `out[:, i] = x[:, perm[i]]`.
pub fn permute_channels<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if perm.len() != c {
        return Err(shape_err!("channel permutation has {} entries for {} channels", perm.len(), c));
    }
    let mut seen = vec![false; c];
    for &p in perm {
        if p >= c || seen[p] {
            return Err(shape_err!("{:?} is not a permutation of 0..{}", perm, c));
        }
        seen[p] = true;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(x.len());
    for b in 0..n {
        for &p in perm {
            let off = (b * c + p) * hw;
            data.extend_from_slice(&x.data()[off..off + hw]);
        }
    }
    Tensor::new(&[n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_matches_explicit_expansion() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2, 3], |i| i as f64 + 1.0);
        let b = Tensor::<f64>::from_fn(&[2, 4, 2, 3], |i| (i as f64) * 0.5);
        let expanded = Tensor::<f64>::from_fn(&[2, 4, 2, 3], |i| {
            let w = i % 3;
            let h = (i / 3) % 2;
            let n = i / 24;
            a.at4(n, 0, h, w)
        });
        let y = binary_forward(BinaryOp::Mul, &a, &b).unwrap();
        let r = binary_forward(BinaryOp::Mul, &expanded, &b).unwrap();
        assert_eq!(y, r);
    }

    #[test]
    fn broadcast_gradient_reduces_over_expanded_axis() {
        let a = Tensor::<f64>::ones(&[1, 1, 1, 2]);
        let b = Tensor::<f64>::from_fn(&[1, 3, 1, 2], |i| i as f64);
        let gy = vec![1.0; 6];
        let (ga, gb) = binary_backward(BinaryOp::Mul, &a, &b, &gy);
        assert_eq!(ga, vec![0.0 + 2.0 + 4.0, 1.0 + 3.0 + 5.0]);
        assert_eq!(gb, vec![1.0; 6]);
    }

    #[test]
    fn incompatible_shapes_error() {
        assert!(broadcast_shape(&[1, 2, 3, 3], &[1, 3, 3, 3]).is_err());
        assert!(broadcast_shape(&[2, 3], &[1, 2, 3]).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f32);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let parts = split_channels_grad(c.data(), 2, 4, &[1, 3]);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());
    }
}
