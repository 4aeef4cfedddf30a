//! Named gradient checks covering every differentiable operation, every
//! index block variant and a tiny end-to-end model with its loss.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::indexnet::{build_index_block, index_forward, IndexBlockConfig, IndexFamily};
use crate::kernels::{self, BinaryOp, Conv2dSpec};
use crate::layers::Ctx;
use crate::mattenet::{build_model, forward, matting_loss, Batch, Fusion, ModelConfig, PoolingMode};
use crate::ops::Ops;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::sampler::{indexed_pool, indexed_upsample};
use crate::synthdata::gen_sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradcheckReport,
}

type CheckFn = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

fn run(name: &str, inputs: &[(String, Tensor<f64>)], cfg: GradcheckConfig, f: &CheckFn) -> Result<NamedReport> {
    let refs: Vec<(&str, Tensor<f64>)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    Ok(NamedReport {
        name: name.into(),
        report: gradcheck(&refs, cfg, f)?,
    })
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.into(), t)).collect()
}

/// Every operation of [`Ops`], each on its own small random input.
pub fn op_checks(cfg: GradcheckConfig) -> Result<Vec<NamedReport>> {
    let mut rng = Rng::derive(cfg.seed, 0x6f70_73);
    let mut out = Vec::new();
    let x4 = randn(&mut rng, &[2, 3, 4, 6]);
    let one = |t: &Tensor<f64>| named(vec![("x", t.clone())]);

    for (name, spec, ci, co, k) in [
        ("conv2d 3x3 same", Conv2dSpec::new(1, 1, 1), 3, 4, 3),
        ("conv2d 2x2 stride 2", Conv2dSpec::new(2, 0, 1), 3, 4, 2),
        ("conv2d 4x4 stride 2 pad 1 grouped", Conv2dSpec::new(2, 1, 3), 3, 6, 4),
        ("conv2d 1x1", Conv2dSpec::new(1, 0, 1), 3, 2, 1),
    ] {
        let inputs = named(vec![
            ("x", randn(&mut rng, &[2, ci, 4, 6])),
            ("w", randn(&mut rng, &[co, ci / spec.groups, k, k])),
            ("b", randn(&mut rng, &[co])),
        ]);
        out.push(run(name, &inputs, cfg, &move |g, l| g.conv2d(&l[0], &l[1], Some(&l[2]), spec))?);
    }

    let bn_inputs = named(vec![
        ("x", x4.clone()),
        ("gamma", randn(&mut rng, &[3])),
        ("beta", randn(&mut rng, &[3])),
    ]);
    let (rm, rv) = (randn(&mut rng, &[3]), Tensor::from_fn(&[3], |_| 0.5 + rng.uniform()));
    for train in [true, false] {
        let (rm, rv) = (rm.clone(), rv.clone());
        let name = if train { "batchnorm (batch statistics)" } else { "batchnorm (running statistics)" };
        out.push(run(name, &bn_inputs, cfg, &move |g, l| {
            Ok(g.batchnorm(&l[0], &l[1], &l[2], &rm, &rv, train, 1e-5)?.0)
        })?);
    }

    out.push(run("relu", &one(&x4), cfg, &|g, l| Ok(g.relu(&l[0])))?);
    out.push(run("sigmoid", &one(&x4), cfg, &|g, l| Ok(g.sigmoid(&l[0])))?);
    let positive = x4.map(|v| v.abs() + 0.1);
    out.push(run("ln", &one(&positive), cfg, &|g, l| Ok(g.ln(&l[0])))?);
    out.push(run("charbonnier", &one(&x4), cfg, &|g, l| Ok(g.charbonnier(&l[0], 1e-3)))?);
    out.push(run("window softmax", &one(&x4), cfg, &|g, l| g.window_softmax(&l[0], 2))?);
    out.push(run("average pooling", &one(&x4), cfg, &|g, l| g.avgpool2(&l[0]))?);
    out.push(run("max pooling", &one(&x4), cfg, &|g, l| Ok(g.maxpool2_with_indices(&l[0])?.0))?);
    out.push(run("nearest upsampling", &one(&x4), cfg, &|g, l| g.upsample_nn2(&l[0]))?);
    out.push(run("bilinear upsampling", &one(&x4), cfg, &|g, l| g.upsample_bilinear2(&l[0]))?);

    for (name, op, bshape) in [
        ("add", BinaryOp::Add, [2, 3, 4, 6]),
        ("sub", BinaryOp::Sub, [2, 3, 4, 6]),
        ("mul", BinaryOp::Mul, [2, 3, 4, 6]),
        ("mul broadcast over channels", BinaryOp::Mul, [2, 1, 4, 6]),
        ("mul broadcast over batch and channels", BinaryOp::Mul, [1, 1, 4, 6]),
    ] {
        let inputs = named(vec![("a", x4.clone()), ("b", randn(&mut rng, &bshape))]);
        out.push(run(name, &inputs, cfg, &move |g, l| g.binary(op, &l[0], &l[1]))?);
    }
    out.push(run("scalar multiple", &one(&x4), cfg, &|g, l| Ok(g.scalar_mul(&l[0], -2.5)))?);
    let cat_inputs = named(vec![("a", x4.clone()), ("b", randn(&mut rng, &[2, 2, 4, 6]))]);
    out.push(run("concat", &cat_inputs, cfg, &|g, l| g.concat(&[&l[0], &l[1]]))?);
    out.push(run("channel permutation", &one(&x4), cfg, &|g, l| g.permute_channels(&l[0], &[2, 0, 1]))?);
    let sh = randn(&mut rng, &[2, 8, 2, 3]);
    out.push(run("pixel shuffle", &one(&sh), cfg, &|g, l| g.pixel_shuffle(&l[0], 2))?);
    out.push(run("pixel unshuffle", &one(&x4), cfg, &|g, l| g.pixel_unshuffle(&l[0], 2))?);
    out.push(run("pad", &one(&x4), cfg, &|g, l| g.pad2d(&l[0], 7, 8))?);
    out.push(run("crop", &one(&x4), cfg, &|g, l| g.crop2d(&l[0], 3, 5))?);
    out.push(run("global average pooling", &one(&x4), cfg, &|g, l| g.global_avg_pool(&l[0]))?);
    out.push(run("sum", &one(&x4), cfg, &|g, l| Ok(g.sum(&l[0])))?);

    let ip = named(vec![("x", x4.clone()), ("map", randn(&mut rng, &[2, 1, 4, 6]))]);
    out.push(run("indexed pooling", &ip, cfg, &|g, l| indexed_pool(g, &l[0], &l[1]))?);
    let iu = named(vec![("d", randn(&mut rng, &[2, 3, 2, 3])), ("map", randn(&mut rng, &[2, 3, 4, 6]))]);
    out.push(run("indexed upsampling", &iu, cfg, &|g, l| indexed_upsample(g, &l[0], &l[1]))?);
    Ok(out)
}

/// Inputs for every trainable parameter of `store`, in id order.
fn param_inputs(store: &ParamStore<f64>) -> (Vec<ParamId>, Vec<(String, Tensor<f64>)>) {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, p)| (id, (p.name.clone(), p.value.clone())))
        .unzip()
}

fn bind(g: &mut Graph<f64>, ids: &[ParamId], leaves: &[NodeId]) {
    for (&id, &n) in ids.iter().zip(leaves) {
        g.bind_param(id, n);
    }
}

/// The variants of an index family: linear and nonlinear, with and without
/// weak context. The max-index family has a single variant.
pub fn family_variants(family: IndexFamily) -> Vec<IndexBlockConfig> {
    if family == IndexFamily::HolisticMaxIndex {
        return vec![IndexBlockConfig::new(family, 4)];
    }
    let mut v = Vec::new();
    for nonlinear in [false, true] {
        for context in [false, true] {
            v.push(IndexBlockConfig::new(family, 4).nonlinear(nonlinear).context(context));
        }
    }
    v
}

pub fn variant_name(cfg: &IndexBlockConfig) -> String {
    format!(
        "{} {}{}",
        cfg.family.name(),
        if cfg.nonlinear { "nonlinear" } else { "linear" },
        if cfg.context { " + context" } else { "" }
    )
}

/// Gradients of indexed pooling and upsampling driven by a freshly built
/// block, with respect to the feature maps and every block parameter.
pub fn family_checks(family: IndexFamily, cfg: GradcheckConfig) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for icfg in family_variants(family) {
        let mut rng = Rng::derive(cfg.seed, 0x6661_6d);
        let mut store = ParamStore::new();
        let block = build_index_block(&icfg, &mut store, "idx", Init::Normal(0.5), &mut rng)?;
        let (ids, params) = param_inputs(&store);
        let x = randn(&mut rng, &[2, 4, 4, 4]);
        let d = randn(&mut rng, &[2, 4, 2, 2]);
        let mut inputs = named(vec![("x", x), ("d", d)]);
        inputs.extend(params);
        for decoder in [false, true] {
            let (store, block, ids) = (store.clone(), block.clone(), ids.clone());
            let name = format!("{} {}", variant_name(&icfg), if decoder { "decoder" } else { "encoder" });
            out.push(run(&name, &inputs, cfg, &move |g, l| {
                bind(g, &ids, &l[2..]);
                let maps = index_forward(g, &store, &block, &l[0], &mut Ctx::train())?;
                if decoder {
                    indexed_upsample(g, &l[1], &maps.decoder)
                } else {
                    indexed_pool(g, &l[0], &maps.encoder)
                }
            })?);
        }
    }
    Ok(out)
}

pub fn tiny_model_config(pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        stages: 1,
        stage_channels: vec![4],
        pooling,
        fusion: Fusion::Concat,
        context_block: true,
        input_channels: 4,
    }
}

/// Loss of a tiny one-stage model on two `8x8` samples, checked against
/// every trainable parameter and the input.
pub fn model_check(pooling: PoolingMode, cfg: GradcheckConfig) -> Result<NamedReport> {
    let mcfg = tiny_model_config(pooling);
    let mut store = ParamStore::new();
    let model = build_model(&mcfg, &mut store, &mut Rng::derive(cfg.seed, 0x6d6f_64))?;
    let mut rng = Rng::derive(cfg.seed, 0x6261_7463);
    let samples = (0..2)
        .map(|_| gen_sample(&mut rng, 8, 8, (1, 3)))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::<f64>::from_samples(&samples)?;
    let (ids, params) = param_inputs(&store);
    let mut inputs = named(vec![("input", batch.input.clone())]);
    inputs.extend(params);
    let name = match pooling {
        PoolingMode::Index(i) => format!("tiny model, {}", variant_name(&i)),
        PoolingMode::MaxPoolUnpool => "tiny model, max pooling / unpooling".into(),
        PoolingMode::Bilinear => "tiny model, bilinear".into(),
    };
    run(&name, &inputs, cfg, &move |g, l| {
        bind(g, &ids, &l[1..]);
        let trace = forward(g, &store, &model, &l[0], &mut Ctx::train())?;
        Ok(matting_loss(g, &trace.alpha, &batch)?.total)
    })
}

/// Pooling modes exercised by the end-to-end check.
pub fn model_check_modes() -> Vec<PoolingMode> {
    let mut v = vec![PoolingMode::Bilinear, PoolingMode::MaxPoolUnpool];
    for f in IndexFamily::ALL {
        v.push(PoolingMode::Index(IndexBlockConfig::new(f, 1).nonlinear(true).context(true)));
    }
    v
}

struct WrongSquare;

impl CustomOp<f64> for WrongSquare {
    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, gy: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(gy).map(|(x, g)| 3.0 * x * g).collect()]
    }
}

/// A squaring operation whose backward pass is deliberately wrong, used to
/// confirm that the checker rejects a corrupted gradient.
pub fn injected_fault_check(cfg: GradcheckConfig) -> Result<NamedReport> {
    let mut rng = Rng::derive(cfg.seed, 0x6661_756c);
    let inputs = named(vec![("x", randn(&mut rng, &[2, 3]))]);
    run("injected fault: x^2 with a 3x backward", &inputs, cfg, &|g, l| {
        let v = kernels::binary_forward(BinaryOp::Mul, g.value(l[0]), g.value(l[0]))?;
        Ok(g.custom(&[l[0]], v, Box::new(WrongSquare)))
    })
}
