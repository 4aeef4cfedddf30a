//! Parameterised layers shared by the index blocks and the matting network.

use alloc::vec::Vec;

use crate::error::Result;
use crate::kernels::{BnStats, Conv2dSpec};
use crate::ops::Ops;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Forward-pass mode plus the batch statistics collected along the way.
#[derive(Clone, Debug)]
pub struct Ctx<T> {
    pub train: bool,
    pub bn_eps: f64,
    pub bn_updates: Vec<(BatchNorm, BnStats<T>)>,
}

impl<T: Real> Ctx<T> {
    pub fn train() -> Self {
        Self {
            train: true,
            bn_eps: 1e-5,
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            ..Self::train()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let per_group = cin / spec.groups.max(1);
        let shape = [cout, per_group, k, k];
        let w = store.add(
            &alloc::format!("{name}.weight"),
            init.tensor(&shape, per_group * k * k, rng),
            ParamKind::Trainable,
        )?;
        let b = if bias {
            Some(store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { w, b, spec })
    }

    pub fn forward<T: Real, B: Ops<T>>(&self, b: &mut B, store: &ParamStore<T>, x: &B::V) -> Result<B::V> {
        let w = b.param(store, self.w);
        let bias = self.b.map(|id| b.param(store, id));
        b.conv2d(x, &w, bias.as_ref(), self.spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    /// `trainable` selects whether the affine terms are optimised or frozen.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, trainable: bool) -> Result<Self> {
        let kind = if trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Frozen
        };
        Ok(Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::ones(&[c]), kind)?,
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[c]), kind)?,
            running_mean: store.add(&alloc::format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            running_var: store.add(&alloc::format!("{name}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Real, B: Ops<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        x: &B::V,
        ctx: &mut Ctx<T>,
    ) -> Result<B::V> {
        let gamma = b.param(store, self.gamma);
        let beta = b.param(store, self.beta);
        let (y, stats) = b.batchnorm(
            x,
            &gamma,
            &beta,
            store.get(self.running_mean),
            store.get(self.running_var),
            ctx.train,
            T::from_f64(ctx.bn_eps),
        )?;
        if let Some(s) = stats {
            ctx.bn_updates.push((*self, s));
        }
        Ok(y)
    }
}

/// Folds batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[(BatchNorm, BnStats<T>)], momentum: f64) {
    let m = T::from_f64(momentum);
    for (bn, stats) in updates {
        for (id, batch) in [(bn.running_mean, &stats.mean), (bn.running_var, &stats.var)] {
            for (r, &s) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bn_trainable: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &alloc::format!("{name}.conv"), cin, cout, k, spec, false, init, rng)?,
            bn: BatchNorm::new(store, &alloc::format!("{name}.bn"), cout, bn_trainable)?,
        })
    }

    pub fn forward<T: Real, B: Ops<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        x: &B::V,
        ctx: &mut Ctx<T>,
    ) -> Result<B::V> {
        let y = self.conv.forward(b, store, x)?;
        let y = self.bn.forward(b, store, &y, ctx)?;
        Ok(b.relu(&y))
    }
}
