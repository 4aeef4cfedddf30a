//! Learned index blocks.
//!
//! A block maps a feature map `x: [N, C, H, W]` to raw index logits of shape
//! `[N, C_e, H, W]`, where `C_e` is 1 for holistic blocks and `C` for
//! depthwise ones. Two normalisations of the same logits are produced: a
//! per-window softmax for pooling and a sigmoid for upsampling.
//!
//! Every learned family predicts, from each `2x2` (or `4x4` with context)
//! neighbourhood, four values per output channel at half resolution and
//! rearranges them into the `2x2` block with the row-major pixel-shuffle
//! layout.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::kernels::{self, Conv2dSpec};
use crate::layers::{BatchNorm, Conv, Ctx};
use crate::ops::Ops;
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IndexFamily {
    /// One index channel shared by all feature channels.
    Holistic,
    /// Depthwise, each index channel predicted from its own feature channel.
    DepthwiseO2O,
    /// Depthwise, each index channel predicted from all feature channels.
    DepthwiseM2O,
    /// Hard max indices of the channel-max map. Not learned.
    HolisticMaxIndex,
}

impl IndexFamily {
    pub const ALL: [IndexFamily; 4] = [
        IndexFamily::Holistic,
        IndexFamily::DepthwiseO2O,
        IndexFamily::DepthwiseM2O,
        IndexFamily::HolisticMaxIndex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndexFamily::Holistic => "hin",
            IndexFamily::DepthwiseO2O => "o2o",
            IndexFamily::DepthwiseM2O => "m2o",
            IndexFamily::HolisticMaxIndex => "hmi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| config_err!("unknown index family {:?} (expected hin, o2o, m2o or hmi)", s))
    }

    pub fn is_depthwise(self) -> bool {
        matches!(self, IndexFamily::DepthwiseO2O | IndexFamily::DepthwiseM2O)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexBlockConfig {
    pub family: IndexFamily,
    pub nonlinear: bool,
    pub context: bool,
    pub channels: usize,
    pub k: usize,
    /// Hidden width multiplier of the nonlinear holistic block.
    pub expansion: usize,
    pub bn_trainable: bool,
}

impl IndexBlockConfig {
    pub fn new(family: IndexFamily, channels: usize) -> Self {
        Self {
            family,
            nonlinear: false,
            context: false,
            channels,
            k: 2,
            expansion: 2,
            bn_trainable: true,
        }
    }

    pub fn nonlinear(mut self, on: bool) -> Self {
        self.nonlinear = on;
        self
    }

    pub fn context(mut self, on: bool) -> Self {
        self.context = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k != 2 {
            return Err(config_err!("index blocks support k = 2 only, got k = {}", self.k));
        }
        if self.channels == 0 {
            return Err(config_err!("index block needs at least one channel"));
        }
        if self.expansion == 0 {
            return Err(config_err!("index block expansion must be at least 1"));
        }
        Ok(())
    }

    /// Number of index channels produced.
    pub fn index_channels(&self) -> usize {
        if self.family.is_depthwise() {
            self.channels
        } else {
            1
        }
    }

    fn kernel(&self) -> usize {
        context_receptive_field(self)
    }

    fn strided_spec(&self, groups: usize) -> Conv2dSpec {
        Conv2dSpec::new(2, if self.context { 1 } else { 0 }, groups)
    }
}

/// Side length of the neighbourhood each index window sees.
pub fn context_receptive_field(cfg: &IndexBlockConfig) -> usize {
    if cfg.context && cfg.family != IndexFamily::HolisticMaxIndex {
        2 * cfg.k
    } else {
        cfg.k
    }
}

/// One of the four parallel branches of a depthwise block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthwiseColumn {
    /// `1x1` conv, BN and ReLU in the nonlinear variant.
    pub pre: Option<(Conv, BatchNorm)>,
    pub conv: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IndexBlockParams {
    Holistic {
        /// Strided conv and BN of the nonlinear variant.
        pre: Option<(Conv, BatchNorm)>,
        /// Produces the four logits per window.
        head: Conv,
    },
    Depthwise {
        columns: Vec<DepthwiseColumn>,
    },
    MaxIndex,
}

/// Allocates and initialises the block's parameters under `prefix`.
pub fn build_index_block<T: Real>(
    cfg: &IndexBlockConfig,
    store: &mut ParamStore<T>,
    prefix: &str,
    init: Init,
    rng: &mut Rng,
) -> Result<IndexBlockParams> {
    cfg.validate()?;
    let c = cfg.channels;
    let kk = cfg.kernel();
    match cfg.family {
        IndexFamily::HolisticMaxIndex => Ok(IndexBlockParams::MaxIndex),
        IndexFamily::Holistic if !cfg.nonlinear => {
            let head = Conv::new(store, &format!("{prefix}.head"), c, 4, kk, cfg.strided_spec(1), true, init, rng)?;
            Ok(IndexBlockParams::Holistic { pre: None, head })
        }
        IndexFamily::Holistic => {
            let hidden = cfg.expansion * c;
            let conv = Conv::new(store, &format!("{prefix}.pre.conv"), c, hidden, kk, cfg.strided_spec(1), false, init, rng)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.pre.bn"), hidden, cfg.bn_trainable)?;
            let head = Conv::new(store, &format!("{prefix}.head"), hidden, 4, 1, Conv2dSpec::default(), true, init, rng)?;
            Ok(IndexBlockParams::Holistic {
                pre: Some((conv, bn)),
                head,
            })
        }
        IndexFamily::DepthwiseO2O | IndexFamily::DepthwiseM2O => {
            let groups = if cfg.family == IndexFamily::DepthwiseO2O { c } else { 1 };
            let mut columns = Vec::with_capacity(4);
            for col in 0..4 {
                let name = format!("{prefix}.col{col}");
                let pre = if cfg.nonlinear {
                    let spec = Conv2dSpec::new(1, 0, groups);
                    let conv = Conv::new(store, &format!("{name}.pre.conv"), c, c, 1, spec, false, init, rng)?;
                    let bn = BatchNorm::new(store, &format!("{name}.pre.bn"), c, cfg.bn_trainable)?;
                    Some((conv, bn))
                } else {
                    None
                };
                let conv = Conv::new(store, &format!("{name}.conv"), c, c, kk, cfg.strided_spec(groups), true, init, rng)?;
                columns.push(DepthwiseColumn { pre, conv });
            }
            Ok(IndexBlockParams::Depthwise { columns })
        }
    }
}

/// Closed-form parameter count, including batch-norm affine terms but not
/// running statistics.
pub fn index_param_count(cfg: &IndexBlockConfig) -> usize {
    let c = cfg.channels;
    let kk = context_receptive_field(cfg);
    let k2 = kk * kk;
    match (cfg.family, cfg.nonlinear) {
        (IndexFamily::HolisticMaxIndex, _) => 0,
        (IndexFamily::Holistic, false) => 4 * c * k2 + 4,
        (IndexFamily::Holistic, true) => {
            let e = cfg.expansion * c;
            e * c * k2 + 2 * e + 4 * e + 4
        }
        (family, nonlinear) => {
            let per_group = if family == IndexFamily::DepthwiseO2O { 1 } else { c };
            let strided = c * per_group * k2 + c;
            let pre = if nonlinear { c * per_group + 2 * c } else { 0 };
            4 * (strided + pre)
        }
    }
}

/// Encoder (window-softmax) and decoder (sigmoid) index maps.
#[derive(Clone, Debug)]
pub struct IndexMapPair<V> {
    pub encoder: V,
    pub decoder: V,
}

/// Raw index logits `[N, C_e, H, W]` of a learned block.
pub fn index_logits<T: Real, B: Ops<T>>(
    b: &mut B,
    store: &ParamStore<T>,
    params: &IndexBlockParams,
    x: &B::V,
    ctx: &mut Ctx<T>,
) -> Result<B::V> {
    check_even(b.shape(x))?;
    match params {
        IndexBlockParams::MaxIndex => Err(config_err!("the max-index block has no logits")),
        IndexBlockParams::Holistic { pre, head } => {
            let h = match pre {
                Some((conv, bn)) => {
                    let h = conv.forward(b, store, x)?;
                    let h = bn.forward(b, store, &h, ctx)?;
                    b.relu(&h)
                }
                None => x.clone(),
            };
            let z = head.forward(b, store, &h)?;
            b.pixel_shuffle(&z, 2)
        }
        IndexBlockParams::Depthwise { columns } => {
            let mut outs = Vec::with_capacity(4);
            for col in columns {
                let h = match &col.pre {
                    Some((conv, bn)) => {
                        let h = conv.forward(b, store, x)?;
                        let h = bn.forward(b, store, &h, ctx)?;
                        b.relu(&h)
                    }
                    None => x.clone(),
                };
                outs.push(col.conv.forward(b, store, &h)?);
            }
            let c = b.shape(&outs[0])[1];
            let refs: Vec<&B::V> = outs.iter().collect();
            let stacked = b.concat(&refs)?;
            // column-major [col][ch] -> [ch][col] so that pixel shuffle
            // sends column `col` to block position (col / 2, col % 2)
            let perm: Vec<usize> = (0..4 * c).map(|j| (j % 4) * c + j / 4).collect();
            let z = b.permute_channels(&stacked, &perm)?;
            b.pixel_shuffle(&z, 2)
        }
    }
}

/// Hard one-hot of the channel-max map, `[N, 1, H, W]`.
pub fn max_index_map<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_even(x.shape())?;
    let hw = h * w;
    let mut squeezed = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        let out = &mut squeezed.data_mut()[b * hw..(b + 1) * hw];
        out.copy_from_slice(&x.data()[b * c * hw..b * c * hw + hw]);
        for ch in 1..c {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (o, &v) in out.iter_mut().zip(src) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    let (_, argmax) = kernels::maxpool2(&squeezed)?;
    Ok(kernels::onehot_from_argmax(squeezed.shape(), &argmax))
}

/// Runs an index block and both normalisation branches.
pub fn index_forward<T: Real, B: Ops<T>>(
    b: &mut B,
    store: &ParamStore<T>,
    params: &IndexBlockParams,
    x: &B::V,
    ctx: &mut Ctx<T>,
) -> Result<IndexMapPair<B::V>> {
    if let IndexBlockParams::MaxIndex = params {
        let onehot = max_index_map(b.value(x))?;
        let m = b.constant(onehot);
        return Ok(IndexMapPair {
            encoder: m.clone(),
            decoder: m,
        });
    }
    let logits = index_logits(b, store, params, x, ctx)?;
    let encoder = b.window_softmax(&logits, 2)?;
    let decoder = b.sigmoid(&logits);
    Ok(IndexMapPair { encoder, decoder })
}

fn check_even(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(crate::error::shape_err!(
            "index blocks need even spatial dims, got {:?}; pad the input first",
            shape
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::ops::Eager;

    fn build(cfg: &IndexBlockConfig, init: Init) -> (ParamStore<f64>, IndexBlockParams) {
        let mut store = ParamStore::new();
        let p = build_index_block(cfg, &mut store, "idx", init, &mut Rng::new(1)).unwrap();
        (store, p)
    }

    #[test]
    fn documented_counts() {
        let c = |f, nl| index_param_count(&IndexBlockConfig::new(f, 8).nonlinear(nl));
        assert_eq!(c(IndexFamily::Holistic, false), 2 * 2 * 8 * 4 + 4);
        assert_eq!(c(IndexFamily::DepthwiseO2O, false), 4 * (2 * 2 * 8 + 8));
        assert_eq!(c(IndexFamily::DepthwiseM2O, false), 4 * (2 * 2 * 8 * 8 + 8));
        assert_eq!(c(IndexFamily::HolisticMaxIndex, true), 0);
    }

    #[test]
    fn receptive_field() {
        let cfg = IndexBlockConfig::new(IndexFamily::Holistic, 4);
        assert_eq!(context_receptive_field(&cfg), 2);
        assert_eq!(context_receptive_field(&cfg.context(true)), 4);
        let hmi = IndexBlockConfig::new(IndexFamily::HolisticMaxIndex, 4).context(true);
        assert_eq!(context_receptive_field(&hmi), 2);
    }

    #[test]
    fn zero_init_linear_holistic_is_uniform() {
        let cfg = IndexBlockConfig::new(IndexFamily::Holistic, 3);
        let (store, p) = build(&cfg, Init::Zeros);
        let mut e = Eager::new();
        let x = e.constant(Tensor::from_fn(&[2, 3, 4, 6], |i| (i as f64).sin()));
        let maps = index_forward(&mut e, &store, &p, &x, &mut Ctx::eval()).unwrap();
        assert_eq!(maps.decoder.shape(), &[2, 1, 4, 6]);
        assert!(maps.decoder.data().iter().all(|&v| v == 0.5));
        assert!(maps.encoder.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn max_index_example() {
        // channel max over two channels is (1, 2, 3, 4) in the window
        let x = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[1., 0., 3., 4., 0., 2., 0., 0.]).unwrap();
        let m = max_index_map(&x).unwrap();
        assert_eq!(m.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn context_preserves_shape() {
        for family in [IndexFamily::Holistic, IndexFamily::DepthwiseO2O, IndexFamily::DepthwiseM2O] {
            for nl in [false, true] {
                let x = Tensor::from_fn(&[1, 4, 6, 8], |i| ((i * 7) % 11) as f64 / 11.0);
                let mut shapes = Vec::new();
                for ctx_on in [false, true] {
                    let cfg = IndexBlockConfig::new(family, 4).nonlinear(nl).context(ctx_on);
                    let (store, p) = build(&cfg, Init::HeNormal);
                    let mut e = Eager::new();
                    let xv = e.constant(x.clone());
                    let maps = index_forward(&mut e, &store, &p, &xv, &mut Ctx::train()).unwrap();
                    shapes.push(maps.encoder.shape().to_vec());
                }
                assert_eq!(shapes[0], shapes[1]);
                assert_eq!(shapes[0], [1, cfg_channels(family, 4), 6, 8]);
            }
        }
    }

    fn cfg_channels(f: IndexFamily, c: usize) -> usize {
        IndexBlockConfig::new(f, c).index_channels()
    }

    #[test]
    fn odd_input_is_rejected() {
        let cfg = IndexBlockConfig::new(IndexFamily::Holistic, 2);
        let (store, p) = build(&cfg, Init::HeNormal);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(index_forward(&mut g, &store, &p, &x, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn depthwise_column_fills_its_block_position() {
        // Zero all columns but one and give it a large bias; the logits then
        // peak at that column's position in every 2x2 block.
        for target in 0..4 {
            let cfg = IndexBlockConfig::new(IndexFamily::DepthwiseO2O, 2);
            let (mut store, p) = build(&cfg, Init::Zeros);
            let IndexBlockParams::Depthwise { columns } = &p else { unreachable!() };
            let bias = columns[target].conv.b.unwrap();
            store.set(bias, Tensor::full(&[2], 5.0)).unwrap();
            let mut e = Eager::new();
            let x = e.constant(Tensor::zeros(&[1, 2, 2, 2]));
            let logits = index_logits(&mut e, &store, &p, &x, &mut Ctx::eval()).unwrap();
            for ch in 0..2 {
                let win = &logits.data()[ch * 4..ch * 4 + 4];
                let expect: Vec<f64> = (0..4).map(|i| if i == target { 5.0 } else { 0.0 }).collect();
                assert_eq!(win, expect.as_slice());
            }
        }
    }
}
