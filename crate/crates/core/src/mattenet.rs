//! A small encoder-decoder matting network whose pooling and upsampling
//! are driven by index maps, together with its loss and training loop.
//!
//! Encoder stage: two `3x3` conv-BN-ReLU layers, then downsampling (indexed
//! pooling, max pooling, or max pooling for the bilinear baseline). The
//! pre-pooling features are kept as the skip. Decoder stage: upsampling
//! with the matching stage's maps (indexed upsampling, max unpooling, or
//! bilinear), optional concatenation of the skip, two conv-BN-ReLU layers.
//! A `3x3` conv and a sigmoid produce alpha.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::graph::Graph;
use crate::indexnet::{build_index_block, index_forward, IndexBlockConfig, IndexBlockParams};
use crate::kernels::{binary_forward, BinaryOp, Conv2dSpec};
use crate::metrics::evaluate;
use crate::layers::{apply_bn_updates, Conv, ConvBnRelu, Ctx};
use crate::ops::Ops;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::sampler::{indexed_pool, indexed_upsample, PoolingContext};
use crate::synthdata::{augment, AugmentConfig, MattingSample, SyntheticDataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoolingMode {
    /// Learned (or max) index blocks; `channels` of the template is ignored
    /// and set per stage.
    Index(IndexBlockConfig),
    /// Max pooling with the indices reused for unpooling.
    MaxPoolUnpool,
    /// Max pooling down, bilinear interpolation up.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    None,
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub stage_channels: Vec<usize>,
    pub pooling: PoolingMode,
    pub fusion: Fusion,
    pub context_block: bool,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            stage_channels: alloc::vec![16, 32, 64, 128],
            pooling: PoolingMode::Index(IndexBlockConfig::new(crate::indexnet::IndexFamily::DepthwiseM2O, 1)),
            fusion: Fusion::Concat,
            context_block: true,
            input_channels: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages != self.stage_channels.len() {
            return Err(config_err!(
                "stages = {} but {} stage channel counts given",
                self.stages,
                self.stage_channels.len()
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(config_err!("stage channel counts must be positive"));
        }
        if self.input_channels != 4 {
            return Err(config_err!("input must be RGB plus trimap (4 channels), got {}", self.input_channels));
        }
        if let PoolingMode::Index(t) = self.pooling {
            IndexBlockConfig { channels: 1, ..t }.validate()?;
        }
        Ok(())
    }

    /// Spatial multiple the input is padded to.
    pub fn stride(&self) -> usize {
        1 << self.stages
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub convs: [ConvBnRelu; 2],
    pub index: Option<IndexBlockParams>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextBlock {
    pub proj: Conv,
    pub fuse: ConvBnRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub convs: [ConvBnRelu; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Vec<EncoderStage>,
    pub context: Option<ContextBlock>,
    /// Ordered deepest first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

/// Builds the network. Index-block parameters are named `enc{s}.index.*`;
/// everything else is backbone.
pub fn build_model<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    let same = Conv2dSpec::new(1, 1, 1);
    let init = Init::HeNormal;
    // index blocks draw from their own stream so the backbone weights do
    // not depend on the pooling mode
    let mut index_rng = Rng::derive(rng.seed(), 0x6964_7800);
    let mut encoder = Vec::with_capacity(cfg.stages);
    let mut cin = cfg.input_channels;
    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        let convs = [
            ConvBnRelu::new(store, &format!("enc{s}.conv0"), cin, c, 3, same, true, init, rng)?,
            ConvBnRelu::new(store, &format!("enc{s}.conv1"), c, c, 3, same, true, init, rng)?,
        ];
        let index = match cfg.pooling {
            PoolingMode::Index(t) => {
                let icfg = IndexBlockConfig { channels: c, ..t };
                Some(build_index_block(&icfg, store, &format!("enc{s}.index"), init, &mut index_rng)?)
            }
            _ => None,
        };
        encoder.push(EncoderStage { convs, index });
        cin = c;
    }
    let deepest = *cfg.stage_channels.last().expect("validated");
    let context = if cfg.context_block {
        let proj = Conv::new(store, "context.proj", deepest, deepest, 1, Conv2dSpec::default(), true, init, rng)?;
        let fuse = ConvBnRelu::new(store, "context.fuse", 2 * deepest, deepest, 1, Conv2dSpec::default(), true, init, rng)?;
        Some(ContextBlock { proj, fuse })
    } else {
        None
    };
    let mut decoder = Vec::with_capacity(cfg.stages);
    for s in (0..cfg.stages).rev() {
        let c = cfg.stage_channels[s];
        let out = if s > 0 { cfg.stage_channels[s - 1] } else { c };
        let cin = match cfg.fusion {
            Fusion::Concat => 2 * c,
            Fusion::None => c,
        };
        decoder.push(DecoderStage {
            convs: [
                ConvBnRelu::new(store, &format!("dec{s}.conv0"), cin, out, 3, same, true, init, rng)?,
                ConvBnRelu::new(store, &format!("dec{s}.conv1"), out, out, 3, same, true, init, rng)?,
            ],
        });
    }
    let head = Conv::new(store, "head", cfg.stage_channels[0], 1, 3, same, true, init, rng)?;
    Ok(Model {
        cfg: cfg.clone(),
        encoder,
        context,
        decoder,
        head,
    })
}

/// Closed-form count of every learnable weight of the model (batch-norm
/// affine terms included, running statistics excluded).
pub fn model_param_count(cfg: &ModelConfig) -> usize {
    let cbr = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let mut total = 0;
    let mut cin = cfg.input_channels;
    for &c in &cfg.stage_channels {
        total += cbr(cin, c, 3) + cbr(c, c, 3);
        if let PoolingMode::Index(t) = cfg.pooling {
            total += crate::indexnet::index_param_count(&IndexBlockConfig { channels: c, ..t });
        }
        cin = c;
    }
    let d = *cfg.stage_channels.last().unwrap_or(&0);
    if cfg.context_block {
        total += d * d + d + cbr(2 * d, d, 1);
    }
    for s in 0..cfg.stages {
        let c = cfg.stage_channels[s];
        let out = if s > 0 { cfg.stage_channels[s - 1] } else { c };
        let cin = if cfg.fusion == Fusion::Concat { 2 * c } else { c };
        total += cbr(cin, out, 3) + cbr(out, out, 3);
    }
    total + cfg.stage_channels[0] * 9 + 1
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<V> {
    /// One per encoder stage, shallowest first. Empty maps for the
    /// bilinear baseline are represented by the max-pool one-hot.
    pub contexts: Vec<PoolingContext<V>>,
    pub skips: Vec<V>,
    /// `[N, 1, H, W]`, cropped back to the input size.
    pub alpha: V,
}

/// Runs the network on `[N, 4, H, W]` input of any spatial size.
pub fn forward<T: Real, B: Ops<T>>(
    b: &mut B,
    store: &ParamStore<T>,
    model: &Model,
    input: &B::V,
    ctx: &mut Ctx<T>,
) -> Result<ForwardTrace<B::V>> {
    let shape = b.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != model.cfg.input_channels {
        return Err(shape_err!("expected [N, {}, H, W] input, got {:?}", model.cfg.input_channels, shape));
    }
    let (h, w) = (shape[2], shape[3]);
    let m = model.cfg.stride();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut x = if (ph, pw) != (h, w) {
        b.pad2d(input, ph, pw)?
    } else {
        input.clone()
    };

    let mut contexts = Vec::with_capacity(model.encoder.len());
    let mut skips = Vec::with_capacity(model.encoder.len());
    for stage in &model.encoder {
        for c in &stage.convs {
            x = c.forward(b, store, &x, ctx)?;
        }
        let s = b.shape(&x);
        let input_shape = [s[0], s[1], s[2], s[3]];
        let (pooled, pc) = match &stage.index {
            Some(p) => {
                let maps = index_forward(b, store, p, &x, ctx)?;
                let pooled = indexed_pool(b, &x, &maps.encoder)?;
                (pooled, PoolingContext {
                    encoder: maps.encoder,
                    decoder: maps.decoder,
                    input_shape,
                })
            }
            None => {
                let (pooled, onehot) = b.maxpool2_with_indices(&x)?;
                let m = b.constant(onehot);
                (pooled, PoolingContext {
                    encoder: m.clone(),
                    decoder: m,
                    input_shape,
                })
            }
        };
        skips.push(x);
        contexts.push(pc);
        x = pooled;
    }

    if let Some(cb) = &model.context {
        let g = b.global_avg_pool(&x)?;
        let g = cb.proj.forward(b, store, &g)?;
        let g = b.relu(&g);
        let s = b.shape(&x);
        let ones = b.constant(Tensor::ones(&[1, 1, s[2], s[3]]));
        let g = b.mul(&g, &ones)?;
        let cat = b.concat(&[&x, &g])?;
        x = cb.fuse.forward(b, store, &cat, ctx)?;
    }

    for (dec, s) in model.decoder.iter().zip((0..model.encoder.len()).rev()) {
        let up = match model.cfg.pooling {
            PoolingMode::Bilinear => b.upsample_bilinear2(&x)?,
            _ => indexed_upsample(b, &x, &contexts[s].decoder)?,
        };
        x = match model.cfg.fusion {
            Fusion::Concat => b.concat(&[&up, &skips[s]])?,
            Fusion::None => up,
        };
        for c in &dec.convs {
            x = c.forward(b, store, &x, ctx)?;
        }
    }
    let logits = model.head.forward(b, store, &x)?;
    let alpha = b.sigmoid(&logits);
    let alpha = if (ph, pw) != (h, w) {
        b.crop2d(&alpha, h, w)?
    } else {
        alpha
    };
    Ok(ForwardTrace { contexts, skips, alpha })
}

fn push_input<T: Real>(image: &[u8], trimap: &[u8], out: &mut Vec<T>) {
    let hw = trimap.len();
    for c in 0..3 {
        out.extend((0..hw).map(|i| T::from_f64(image[i * 3 + c] as f64 * (1.0 / 255.0))));
    }
    out.extend(trimap.iter().map(|&t| T::from_f64(t as f64 * (1.0 / 255.0))));
}

/// `[1, 4, H, W]` network input from interleaved RGB and a trimap, scaled
/// as in [`Batch::from_samples`].
pub fn input_tensor<T: Real>(image: &[u8], trimap: &[u8], height: usize, width: usize) -> Result<Tensor<T>> {
    let hw = height * width;
    if image.len() != 3 * hw || trimap.len() != hw {
        return Err(shape_err!(
            "{}x{} input needs {} RGB and {} trimap bytes, got {} and {}",
            width,
            height,
            3 * hw,
            hw,
            image.len(),
            trimap.len()
        ));
    }
    let mut data = Vec::with_capacity(4 * hw);
    push_input(image, trimap, &mut data);
    Tensor::new(&[1, 4, height, width], data)
}

/// Training targets for a batch, in network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[N, 4, H, W]`: RGB and trimap scaled to `[0, 1]`.
    pub input: Tensor<T>,
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub alpha: Tensor<T>,
    /// `[N, 3, H, W]` in `[0, 255]`.
    pub fg: Option<Tensor<T>>,
    pub bg: Option<Tensor<T>>,
    /// `[N, 1, H, W]`, one on unknown pixels.
    pub mask: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[MattingSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| config_err!("empty batch"))?;
        let (h, w) = (first.height, first.width);
        if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(shape_err!("batch samples differ in size"));
        }
        let n = samples.len();
        let hw = h * w;
        let mut input = Vec::with_capacity(n * 4 * hw);
        let mut alpha = Vec::with_capacity(n * hw);
        let mut fg = Vec::with_capacity(n * 3 * hw);
        let mut bg = Vec::with_capacity(n * 3 * hw);
        let mut mask = Vec::with_capacity(n * hw);
        let planar = |src: &[u8], ch: usize, scale: f64, out: &mut Vec<T>| {
            for c in 0..ch {
                out.extend((0..hw).map(|i| T::from_f64(src[i * ch + c] as f64 * scale)));
            }
        };
        for s in samples {
            push_input(&s.image, &s.trimap, &mut input);
            planar(&s.alpha, 1, 1.0 / 255.0, &mut alpha);
            planar(&s.fg, 3, 1.0, &mut fg);
            planar(&s.bg, 3, 1.0, &mut bg);
            mask.extend(s.unknown_mask().into_iter().map(|u| if u { T::one() } else { T::zero() }));
        }
        Ok(Self {
            input: Tensor::new(&[n, 4, h, w], input)?,
            alpha: Tensor::new(&[n, 1, h, w], alpha)?,
            fg: Some(Tensor::new(&[n, 3, h, w], fg)?),
            bg: Some(Tensor::new(&[n, 3, h, w], bg)?),
            mask: Tensor::new(&[n, 1, h, w], mask)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossTerms<V> {
    pub l_alpha: V,
    pub l_comp: V,
    pub total: V,
    /// Set when the unknown region is empty and every term is zero.
    pub empty_mask: bool,
}

pub const LOSS_EPS: f64 = 1e-6;

/// Alpha-prediction and composition losses, averaged over unknown pixels.
pub fn matting_loss<T: Real, B: Ops<T>>(b: &mut B, alpha_pred: &B::V, batch: &Batch<T>) -> Result<LossTerms<B::V>> {
    let (Some(fg), Some(bg)) = (&batch.fg, &batch.bg) else {
        return Err(config_err!("the composition loss needs the foreground and background"));
    };
    if b.shape(alpha_pred) != batch.alpha.shape() || batch.mask.shape() != batch.alpha.shape() {
        return Err(shape_err!(
            "prediction {:?} does not match target {:?}",
            b.shape(alpha_pred),
            batch.alpha.shape()
        ));
    }
    let count = batch.mask.data().iter().filter(|&&m| m > T::zero()).count();
    if count == 0 {
        let zero = b.constant(Tensor::scalar(T::zero()));
        return Ok(LossTerms {
            l_alpha: zero.clone(),
            l_comp: zero.clone(),
            total: zero,
            empty_mask: true,
        });
    }
    let eps = T::from_f64(LOSS_EPS);
    let mask = b.constant(batch.mask.clone());

    let gt = b.constant(batch.alpha.clone());
    let d = b.sub(alpha_pred, &gt)?;
    let d = b.charbonnier(&d, eps);
    let d = b.mul(&d, &mask)?;
    let s = b.sum(&d);
    let l_alpha = b.scalar_mul(&s, T::from_f64(1.0 / count as f64));

    // c = B + alpha (F - B); the target is recomposited from the true alpha
    let diff = binary_forward(BinaryOp::Sub, fg, bg)?;
    let target = binary_forward(BinaryOp::Add, &binary_forward(BinaryOp::Mul, &batch.alpha, &diff)?, bg)?;
    let diff = b.constant(diff);
    let bgv = b.constant(bg.clone());
    let cp = b.mul(alpha_pred, &diff)?;
    let cp = b.add(&cp, &bgv)?;
    let cg = b.constant(target);
    let e = b.sub(&cp, &cg)?;
    let e = b.charbonnier(&e, eps);
    let e = b.mul(&e, &mask)?;
    let s = b.sum(&e);
    let l_comp = b.scalar_mul(&s, T::from_f64(1.0 / (3.0 * count as f64 * 255.0)));

    let total = b.add(&l_alpha, &l_comp)?;
    Ok(LossTerms {
        l_alpha,
        l_comp,
        total,
        empty_mask: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Fractions of `steps` after which the learning rate drops by 10x.
    pub decay_at: Vec<f64>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub bn_momentum: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            decay_at: alloc::vec![0.6, 0.85],
            seed: 0,
            augment: AugmentConfig::desk(64),
            bn_momentum: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate used at (zero-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let drops = self
            .decay_at
            .iter()
            .filter(|&&f| step >= (f * self.steps as f64) as u64)
            .count();
        self.lr * num_traits::Float::powi(0.1f64, drops as i32)
    }
}

/// Parameters and optimiser state of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    /// Number of completed steps.
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub l_alpha: f64,
    pub l_comp: f64,
    pub total: f64,
    pub empty_mask: bool,
}

/// One forward/backward pass and Adam update.
pub fn train_step<T: Real>(
    model: &Model,
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    lr: f64,
    tcfg: &TrainConfig,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let input = g.constant(batch.input.clone());
    let mut ctx = Ctx::train();
    let trace = forward(&mut g, &state.params, model, &input, &mut ctx)?;
    let loss = matting_loss(&mut g, &trace.alpha, batch)?;
    let read = |g: &Graph<T>, v| g.value(v).data()[0].as_f64();
    let metrics = StepMetrics {
        step: state.step,
        lr,
        l_alpha: read(&g, loss.l_alpha),
        l_comp: read(&g, loss.l_comp),
        total: read(&g, loss.total),
        empty_mask: loss.empty_mask,
    };
    g.backward(loss.total)?;
    let grads = g.param_grads();
    drop(g);
    adam_step(&mut state.params, &grads, &mut state.adam, lr, tcfg.adam)?;
    apply_bn_updates(&mut state.params, &ctx.bn_updates, tcfg.bn_momentum);
    state.step += 1;
    Ok(metrics)
}

/// The augmented samples of training step `step`; a pure function of the
/// seed and the step.
pub fn batch_for_step(dataset: &SyntheticDataset, tcfg: &TrainConfig, step: u64) -> Result<Vec<MattingSample>> {
    let mut rng = Rng::derive(tcfg.seed, 0x7472_0000_0000 ^ step);
    (0..tcfg.batch)
        .map(|_| {
            let s = dataset.sample(rng.below(dataset.count))?;
            augment(&s, &tcfg.augment, &mut rng)
        })
        .collect()
}

pub fn init_state<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Model, TrainState<T>)> {
    let mut params = ParamStore::new();
    let model = build_model(cfg, &mut params, &mut Rng::derive(seed, 0x696e_6974))?;
    Ok((
        model,
        TrainState {
            params,
            adam: AdamState::new(),
            step: 0,
        },
    ))
}

/// Trains until `tcfg.steps`, continuing from `state.step`. `on_step` sees
/// every step's metrics and the state after it, and may request an early
/// stop by returning `false`.
pub fn fit<T: Real>(
    model: &Model,
    state: &mut TrainState<T>,
    dataset: &SyntheticDataset,
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics, &TrainState<T>) -> bool,
) -> Result<()> {
    while state.step < tcfg.steps {
        let samples = batch_for_step(dataset, tcfg, state.step)?;
        let batch = Batch::from_samples(&samples)?;
        let m = train_step(model, state, &batch, tcfg.lr_at(state.step), tcfg)?;
        if !on_step(&m, state) {
            break;
        }
    }
    Ok(())
}

/// Alpha prediction in evaluation mode, without recording a graph.
pub fn predict<T: Real>(model: &Model, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut e = crate::ops::Eager::new();
    let x = e.constant(input.clone());
    let trace = forward(&mut e, params, model, &x, &mut Ctx::eval())?;
    Ok((*trace.alpha).clone())
}

/// The matte as it is stored and scored: known trimap regions take their
/// trimap value and the rest is quantised to 8 bits.
pub fn finalize_alpha<T: Real>(alpha: &[T], trimap: &[u8]) -> Result<Vec<f64>> {
    if alpha.len() != trimap.len() {
        return Err(shape_err!("{} alpha values for a trimap of {}", alpha.len(), trimap.len()));
    }
    Ok(alpha
        .iter()
        .zip(trimap)
        .map(|(&a, &t)| match t {
            crate::synthdata::TRIMAP_FG => 1.0,
            crate::synthdata::TRIMAP_BG => 0.0,
            _ => num_traits::Float::round(a.as_f64().clamp(0.0, 1.0) * 255.0) / 255.0,
        })
        .collect())
}

/// Mean metrics of a model over a dataset, evaluated on full samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub samples: usize,
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    /// Samples whose connectivity error fell back to SAD.
    pub conn_fallbacks: usize,
}

/// Predicts every sample of `dataset` in batches of `batch` and averages
/// the unknown-region metrics.
pub fn evaluate_dataset<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    dataset: &SyntheticDataset,
    batch: usize,
) -> Result<EvalSummary> {
    if batch == 0 || dataset.count == 0 {
        return Err(config_err!("evaluation needs a positive batch size and a non-empty dataset"));
    }
    let mut sum = EvalSummary::default();
    let mut i = 0;
    while i < dataset.count {
        let samples = (i..dataset.count.min(i + batch))
            .map(|j| dataset.sample(j))
            .collect::<Result<Vec<_>>>()?;
        let input = Batch::<T>::from_samples(&samples)?.input;
        let alpha = predict(model, params, &input)?;
        let hw = dataset.size * dataset.size;
        for (k, s) in samples.iter().enumerate() {
            let pred = finalize_alpha(&alpha.data()[k * hw..(k + 1) * hw], &s.trimap)?;
            let r = evaluate(&pred, &s.alpha_f64(), &s.unknown_mask(), s.height, s.width)?;
            sum.sad += r.sad_k;
            sum.mse += r.mse;
            sum.grad += r.grad;
            sum.conn += r.conn;
            sum.conn_fallbacks += r.conn_fallback as usize;
        }
        i += samples.len();
    }
    let n = dataset.count as f64;
    sum.samples = dataset.count;
    sum.sad /= n;
    sum.mse /= n;
    sum.grad /= n;
    sum.conn /= n;
    Ok(sum)
}

/// An 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Decoder index maps of every stage, averaged over channels and scaled to
/// `[0, 255]`, for the first item of the batch.
pub fn export_index_maps<T: Real>(contexts: &[PoolingContext<Tensor<T>>]) -> Result<Vec<GrayImage>> {
    contexts
        .iter()
        .map(|pc| {
            let (_, c, h, w) = pc.decoder.dims4()?;
            let hw = h * w;
            let data = (0..hw)
                .map(|i| {
                    let s: f64 = (0..c).map(|ch| pc.decoder.data()[ch * hw + i].as_f64()).sum();
                    ((s / c as f64).clamp(0.0, 1.0) * 255.0 + 0.5) as u8
                })
                .collect();
            Ok(GrayImage {
                height: h,
                width: w,
                data,
            })
        })
        .collect()
}

/// Runs the network in evaluation mode and returns its pooling contexts
/// as plain tensors.
pub fn trace_index_maps<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<Vec<PoolingContext<Tensor<T>>>> {
    let mut e = crate::ops::Eager::new();
    let x = e.constant(input.clone());
    let trace = forward(&mut e, params, model, &x, &mut Ctx::eval())?;
    Ok(trace
        .contexts
        .into_iter()
        .map(|pc| PoolingContext {
            encoder: (*pc.encoder).clone(),
            decoder: (*pc.decoder).clone(),
            input_shape: pc.input_shape,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexnet::IndexFamily;

    fn tiny(pooling: PoolingMode) -> ModelConfig {
        ModelConfig {
            stages: 2,
            stage_channels: alloc::vec![4, 8],
            pooling,
            fusion: Fusion::Concat,
            context_block: true,
            input_channels: 4,
        }
    }

    #[test]
    fn default_model_shapes() {
        let cfg = ModelConfig::default();
        let (model, state) = init_state::<f32>(&cfg, 0).unwrap();
        assert_eq!(state.params.weight_count(), model_param_count(&cfg));
        let x = Tensor::from_fn(&[1, 4, 32, 32], |i| (i % 7) as f32 / 7.0);
        let a = predict(&model, &state.params, &x).unwrap();
        assert_eq!(a.shape(), &[1, 1, 32, 32]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let cfg = tiny(PoolingMode::Index(IndexBlockConfig::new(IndexFamily::Holistic, 1)));
        let (model, state) = init_state::<f64>(&cfg, 1).unwrap();
        let x = Tensor::from_fn(&[1, 4, 10, 7], |i| (i % 5) as f64 / 5.0);
        assert_eq!(predict(&model, &state.params, &x).unwrap().shape(), &[1, 1, 10, 7]);
    }

    #[test]
    fn baselines_have_no_index_parameters() {
        for p in [PoolingMode::Bilinear, PoolingMode::MaxPoolUnpool] {
            let (_, state) = init_state::<f32>(&tiny(p), 0).unwrap();
            assert_eq!(state.params.weight_count_with_prefix("enc0.index"), 0);
        }
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig {
            steps: 100,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 1.0);
        assert!((t.lr_at(60) - 0.1).abs() < 1e-12);
        assert!((t.lr_at(85) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_gives_zero_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.3), true);
        let batch = Batch {
            input: Tensor::zeros(&[1, 4, 2, 2]),
            alpha: Tensor::zeros(&[1, 1, 2, 2]),
            fg: Some(Tensor::zeros(&[1, 3, 2, 2])),
            bg: Some(Tensor::zeros(&[1, 3, 2, 2])),
            mask: Tensor::zeros(&[1, 1, 2, 2]),
        };
        let l = matting_loss(&mut g, &a, &batch).unwrap();
        assert!(l.empty_mask);
        assert_eq!(g.value(l.total).data(), &[0.0]);
        let no_fg = Batch { fg: None, ..batch };
        assert!(matting_loss(&mut g, &a, &no_fg).is_err());
    }

    #[test]
    fn one_pixel_alpha_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[1, 1, 1, 2], &[0.8, 0.1]).unwrap(), true);
        let batch = Batch {
            input: Tensor::zeros(&[1, 4, 1, 2]),
            alpha: Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 0.9]).unwrap(),
            fg: Some(Tensor::full(&[1, 3, 1, 2], 100.0)),
            bg: Some(Tensor::full(&[1, 3, 1, 2], 100.0)),
            mask: Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 0.0]).unwrap(),
        };
        let l = matting_loss(&mut g, &a, &batch).unwrap();
        let expect = (0.09f64 + 1e-12).sqrt();
        assert!((g.value(l.l_alpha).data()[0] - expect).abs() < 1e-12);
        // F == B, so the composite does not depend on alpha
        assert!((g.value(l.l_comp).data()[0] - 1e-6 / 255.0).abs() < 1e-15);
    }
}
