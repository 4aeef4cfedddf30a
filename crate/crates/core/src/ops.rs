//! The operation surface shared by recorded ([`Graph`]) and unrecorded
//! ([`Eager`]) evaluation.
//!
//! Model code is written once against [`Ops`]; training runs it on a
//! [`Graph`] to obtain gradients, inference runs it on [`Eager`] so that
//! intermediate activations are freed as soon as they go out of scope.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::{self, BinaryOp, BnStats, Conv2dSpec};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

mod sealed {
    use super::*;

    pub trait Backend<T: Real> {
        type V: Clone;

        fn val<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

        fn id(&self, v: &Self::V) -> NodeId;

        fn push(&mut self, value: Tensor<T>, op: impl FnOnce() -> Op<T>) -> Self::V;

        fn constant_handle(&mut self, value: Tensor<T>) -> Self::V;

        fn param_handle(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V;
    }
}

use sealed::Backend;

/// Differentiable tensor operations. Implemented by [`Graph`] and [`Eager`].
pub trait Ops<T: Real>: Backend<T> {
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        self.val(v)
    }

    fn shape<'a>(&'a self, v: &'a Self::V) -> &'a [usize] {
        self.val(v).shape()
    }

    /// A value that never receives gradients.
    fn constant(&mut self, value: Tensor<T>) -> Self::V {
        self.constant_handle(value)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V {
        self.param_handle(store, id)
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, spec: Conv2dSpec) -> Result<Self::V> {
        let y = kernels::conv2d_forward(self.val(x), self.val(w), b.map(|b| self.val(b)), spec)?;
        let (x, w, b) = (self.id(x), self.id(w), b.map(|b| self.id(b)));
        Ok(self.push(y, || Op::Conv2d { x, w, b, spec }))
    }

    /// Batch normalisation. In training mode the batch statistics are
    /// returned so the caller can fold them into its running estimates.
    #[allow(clippy::too_many_arguments)]
    fn batchnorm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
        eps: T,
    ) -> Result<(Self::V, Option<BnStats<T>>)> {
        let out = kernels::batchnorm_forward(
            self.val(x),
            self.val(gamma),
            self.val(beta),
            running_mean.data(),
            running_var.data(),
            train,
            eps,
        )?;
        let (x, gamma, beta) = (self.id(x), self.id(gamma), self.id(beta));
        let (xhat, inv_std) = (out.xhat, out.inv_std);
        let v = self.push(out.y, || Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        });
        Ok((v, out.batch))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        let y = self.val(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let x = self.id(x);
        self.push(y, || Op::Relu(x))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        let y = self.val(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let x = self.id(x);
        self.push(y, || Op::Sigmoid(x))
    }

    /// Natural logarithm.
    fn ln(&mut self, x: &Self::V) -> Self::V {
        let y = self.val(x).map(|v| v.ln());
        let x = self.id(x);
        self.push(y, || Op::Ln(x))
    }

    /// `sqrt(x^2 + eps^2)`, elementwise.
    fn charbonnier(&mut self, x: &Self::V, eps: T) -> Self::V {
        let e2 = eps * eps;
        let y = self.val(x).map(|v| (v * v + e2).sqrt());
        let x = self.id(x);
        self.push(y, || Op::Charbonnier { x })
    }

    fn window_softmax(&mut self, x: &Self::V, k: usize) -> Result<Self::V> {
        let y = kernels::window_softmax(self.val(x), k)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::WindowSoftmax { x, k }))
    }

    fn avgpool2(&mut self, x: &Self::V) -> Result<Self::V> {
        let y = kernels::avgpool2(self.val(x))?;
        let x = self.id(x);
        Ok(self.push(y, || Op::AvgPool2(x)))
    }

    /// Max pooling. Also returns the full-resolution one-hot index map.
    fn maxpool2_with_indices(&mut self, x: &Self::V) -> Result<(Self::V, Tensor<T>)> {
        let (y, argmax) = kernels::maxpool2(self.val(x))?;
        let onehot = kernels::onehot_from_argmax(self.val(x).shape(), &argmax);
        let x = self.id(x);
        Ok((self.push(y, || Op::MaxPool2 { x, argmax }), onehot))
    }

    fn upsample_nn2(&mut self, x: &Self::V) -> Result<Self::V> {
        let y = kernels::upsample_nn2(self.val(x))?;
        let x = self.id(x);
        Ok(self.push(y, || Op::UpsampleNn2(x)))
    }

    fn upsample_bilinear2(&mut self, x: &Self::V) -> Result<Self::V> {
        let y = kernels::upsample_bilinear2(self.val(x))?;
        let x = self.id(x);
        Ok(self.push(y, || Op::UpsampleBilinear2(x)))
    }

    fn binary(&mut self, op: BinaryOp, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        let y = kernels::binary_forward(op, self.val(a), self.val(b))?;
        let (a, b) = (self.id(a), self.id(b));
        Ok(self.push(y, || Op::Binary { op, a, b }))
    }

    /// Elementwise product, broadcasting over singleton axes.
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryOp::Add, a, b)
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryOp::Sub, a, b)
    }

    fn scalar_mul(&mut self, x: &Self::V, c: T) -> Self::V {
        let y = self.val(x).map(|v| v * c);
        let x = self.id(x);
        self.push(y, || Op::Scale { x, c })
    }

    fn concat(&mut self, xs: &[&Self::V]) -> Result<Self::V> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|x| self.val(x)).collect();
        let y = kernels::concat_channels(&vals)?;
        let ids: Vec<NodeId> = xs.iter().map(|x| self.id(x)).collect();
        Ok(self.push(y, || Op::Concat(ids)))
    }

    fn permute_channels(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        let y = kernels::permute_channels(self.val(x), perm)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::PermuteChannels {
            x,
            perm: perm.to_vec(),
        }))
    }

    fn pixel_shuffle(&mut self, x: &Self::V, r: usize) -> Result<Self::V> {
        let y = kernels::pixel_shuffle(self.val(x), r)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::PixelShuffle { x, r }))
    }

    fn pixel_unshuffle(&mut self, x: &Self::V, r: usize) -> Result<Self::V> {
        let y = kernels::pixel_unshuffle(self.val(x), r)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::PixelUnshuffle { x, r }))
    }

    fn pad2d(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        let y = kernels::pad2d(self.val(x), h, w)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::Pad2d(x)))
    }

    fn crop2d(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        let y = kernels::crop2d(self.val(x), h, w)?;
        let x = self.id(x);
        Ok(self.push(y, || Op::Crop2d(x)))
    }

    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V> {
        let y = kernels::global_avg_pool(self.val(x))?;
        let x = self.id(x);
        Ok(self.push(y, || Op::GlobalAvgPool(x)))
    }

    /// Sum of all elements, as a one-element tensor.
    fn sum(&mut self, x: &Self::V) -> Self::V {
        let y = Tensor::scalar(self.val(x).sum());
        let x = self.id(x);
        self.push(y, || Op::Sum(x))
    }
}

impl<T: Real> Backend<T> for Graph<T> {
    type V = NodeId;

    fn val<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.value(*v)
    }

    fn id(&self, v: &NodeId) -> NodeId {
        *v
    }

    fn push(&mut self, value: Tensor<T>, op: impl FnOnce() -> Op<T>) -> NodeId {
        self.record(value, op)
    }

    fn constant_handle(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn param_handle(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.param_node(store, id)
    }
}

impl<T: Real> Ops<T> for Graph<T> {}

/// Unrecorded evaluation. Values are reference-counted and dropped as soon
/// as the model code releases them.
#[derive(Default)]
pub struct Eager<T: Real> {
    params: BTreeMap<ParamId, Rc<Tensor<T>>>,
}

impl<T: Real> Eager<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }
}

impl<T: Real> Backend<T> for Eager<T> {
    type V = Rc<Tensor<T>>;

    fn val<'a>(&'a self, v: &'a Rc<Tensor<T>>) -> &'a Tensor<T> {
        v
    }

    fn id(&self, _: &Rc<Tensor<T>>) -> NodeId {
        NodeId::DETACHED
    }

    fn push(&mut self, value: Tensor<T>, _: impl FnOnce() -> Op<T>) -> Rc<Tensor<T>> {
        Rc::new(value)
    }

    fn constant_handle(&mut self, value: Tensor<T>) -> Rc<Tensor<T>> {
        Rc::new(value)
    }

    fn param_handle(&mut self, store: &ParamStore<T>, id: ParamId) -> Rc<Tensor<T>> {
        self.params
            .entry(id)
            .or_insert_with(|| Rc::new(store.get(id).clone()))
            .clone()
    }
}

impl<T: Real> Ops<T> for Eager<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    fn pipeline<B: Ops<f64>>(b: &mut B, x: Tensor<f64>) -> Tensor<f64> {
        let x = b.constant(x);
        let s = b.sigmoid(&x);
        let p = b.window_softmax(&s, 2).unwrap();
        let m = b.mul(&x, &p).unwrap();
        let y = b.avgpool2(&m).unwrap();
        b.value(&y).clone()
    }

    #[test]
    fn graph_and_eager_agree_bitwise() {
        let mut rng = crate::Rng::new(2);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.normal());
        let mut g = Graph::new();
        let mut e = Eager::new();
        assert_eq!(pipeline(&mut g, x.clone()), pipeline(&mut e, x));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
        let r = g.relu(&x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::from_f64(&[3], &[0.0, -800.0, 800.0]).unwrap());
        let s = g.sigmoid(&z);
        let sd = g.value(s).data();
        assert_eq!(sd[0], 0.5);
        assert!(sd.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(&x, &x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(&x, &c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }
}
