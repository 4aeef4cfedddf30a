use indexnet_core::indexnet::{IndexBlockConfig, IndexFamily};
use indexnet_core::kernels::maxpool2;
use indexnet_core::layers::Ctx;
use indexnet_core::mattenet::*;
use indexnet_core::sampler::{indexed_upsample, max_unpool_scatter};
use indexnet_core::synthdata::{gen_sample, AugmentConfig, SyntheticDataset};
use indexnet_core::{Eager, Ops, ParamKind, Rng, Tensor};

fn all_modes() -> Vec<PoolingMode> {
    let mut v = vec![PoolingMode::Bilinear, PoolingMode::MaxPoolUnpool];
    for f in IndexFamily::ALL {
        for nl in [false, true] {
            for ctx in [false, true] {
                v.push(PoolingMode::Index(IndexBlockConfig::new(f, 1).nonlinear(nl).context(ctx)));
            }
        }
    }
    v
}

fn small(pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        stages: 3,
        stage_channels: vec![4, 8, 8],
        pooling,
        ..ModelConfig::default()
    }
}

fn batch(seed: u64, n: usize, size: usize) -> Batch<f64> {
    let mut rng = Rng::new(seed);
    let samples: Vec<_> = (0..n).map(|_| gen_sample(&mut rng, size, size, (2, 5)).unwrap()).collect();
    Batch::from_samples(&samples).unwrap()
}

fn loss_values(pred: &Tensor<f64>, b: &Batch<f64>) -> (f64, f64, f64) {
    let mut e = Eager::new();
    let p = e.constant(pred.clone());
    let l = matting_loss(&mut e, &p, b).unwrap();
    (l.l_alpha.data()[0], l.l_comp.data()[0], l.total.data()[0])
}

#[test]
fn loss_ignores_predictions_outside_the_unknown_region() {
    let b = batch(1, 2, 16);
    let mut rng = Rng::new(2);
    let pred = Tensor::from_fn(b.alpha.shape(), |_| rng.uniform());
    let mut other = pred.clone();
    for (v, &m) in other.data_mut().iter_mut().zip(b.mask.data()) {
        if m == 0.0 {
            *v = rng.uniform();
        }
    }
    assert!(b.mask.data().iter().any(|&m| m == 0.0));
    let (a, c) = (loss_values(&pred, &b), loss_values(&other, &b));
    assert_eq!((a.0.to_bits(), a.1.to_bits(), a.2.to_bits()), (c.0.to_bits(), c.1.to_bits(), c.2.to_bits()));
}

#[test]
fn loss_hand_values() {
    let mut b = batch(3, 1, 4);
    b.mask = Tensor::zeros(&[1, 1, 4, 4]);
    b.mask.data_mut()[5] = 1.0;
    let mut pred = b.alpha.clone();
    let (la, lc, _) = loss_values(&pred, &b);
    assert!((la - 1e-6).abs() < 1e-15);
    assert!(lc <= 1e-6 / 255.0 + 1e-15);

    pred.data_mut()[5] = b.alpha.data()[5] + 0.3;
    let (la, _, total) = loss_values(&pred, &b);
    assert!((la - (0.09f64 + 1e-12).sqrt()).abs() < 1e-12);
    assert!(total >= la);
}

#[test]
fn composition_loss_needs_foreground_and_background() {
    let mut b = batch(4, 1, 8);
    b.fg = None;
    let mut e = Eager::new();
    let p = e.constant(b.alpha.clone());
    assert!(matting_loss(&mut e, &p, &b).is_err());
}

#[test]
fn parameter_counts_and_backbone_are_shared_across_pooling_modes() {
    let reference = init_state::<f64>(&small(PoolingMode::Bilinear), 7).unwrap().1.params;
    for mode in all_modes() {
        let cfg = small(mode);
        let (_, st) = init_state::<f64>(&cfg, 7).unwrap();
        assert_eq!(st.params.weight_count(), model_param_count(&cfg), "{mode:?}");
        let index: usize = (0..cfg.stages)
            .map(|s| st.params.weight_count_with_prefix(&format!("enc{s}.index")))
            .sum();
        assert_eq!(st.params.weight_count() - index, reference.weight_count(), "{mode:?}");
        for (_, p) in reference.iter() {
            let id = st.params.find(&p.name).unwrap();
            assert_eq!(st.params.get(id), &p.value, "{} differs under {mode:?}", p.name);
        }
    }
}

#[test]
fn alpha_is_open_unit_interval_and_forward_is_deterministic() {
    for mode in all_modes() {
        let (model, st) = init_state::<f64>(&small(mode), 3).unwrap();
        let b = batch(5, 2, 24);
        let a = predict(&model, &st.params, &b.input).unwrap();
        assert_eq!(a.shape(), &[2, 1, 24, 24]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, predict(&model, &st.params, &b.input).unwrap());
    }
}

#[test]
fn max_pooling_baseline_unpools_to_argmax_positions() {
    let (model, st) = init_state::<f64>(&small(PoolingMode::MaxPoolUnpool), 4).unwrap();
    let b = batch(6, 2, 16);
    let mut e = Eager::new();
    let x = e.constant(b.input.clone());
    let trace = forward(&mut e, &st.params, &model, &x, &mut Ctx::eval()).unwrap();
    let mut rng = Rng::new(9);
    for (pc, skip) in trace.contexts.iter().zip(&trace.skips) {
        let (_, argmax) = maxpool2(skip).unwrap();
        let (n, c, h, w) = skip.dims4().unwrap();
        let d = Tensor::<f64>::from_fn(&[n, c, h / 2, w / 2], |_| rng.normal() + 5.0);
        let dv = e.constant(d.clone());
        let up = indexed_upsample(&mut e, &dv, &pc.decoder).unwrap();
        assert_eq!(*up, max_unpool_scatter(&d, &argmax).unwrap());
    }
}

#[test]
fn indices_only_pipeline_has_binary_maps_and_no_index_weights() {
    let cfg = ModelConfig {
        fusion: Fusion::None,
        ..small(PoolingMode::Index(IndexBlockConfig::new(IndexFamily::HolisticMaxIndex, 1)))
    };
    let (model, st) = init_state::<f64>(&cfg, 0).unwrap();
    assert_eq!(st.params.weight_count_with_prefix("enc0.index"), 0);
    let b = batch(7, 1, 16);
    let maps = export_index_maps(&trace_index_maps(&model, &st.params, &b.input).unwrap()).unwrap();
    assert_eq!(maps.len(), 3);
    for (s, m) in maps.iter().enumerate() {
        assert_eq!((m.height, m.width), (16 >> s, 16 >> s));
        assert!(m.data.iter().all(|&v| v == 0 || v == 255));
    }
}

#[test]
fn constant_map_exports_uniform_gray() {
    let pc = indexnet_core::sampler::PoolingContext {
        encoder: Tensor::<f64>::full(&[1, 3, 4, 4], 0.25),
        decoder: Tensor::full(&[1, 3, 4, 4], 0.5),
        input_shape: [1, 3, 4, 4],
    };
    let img = &export_index_maps(&[pc]).unwrap()[0];
    assert!(img.data.iter().all(|&v| v == img.data[0]));
    assert_eq!(img.data[0], 128);
}

fn tiny_train(steps: u64, seed: u64) -> (ModelConfig, TrainConfig, SyntheticDataset) {
    let cfg = ModelConfig {
        stages: 2,
        stage_channels: vec![4, 8],
        pooling: PoolingMode::Index(IndexBlockConfig::new(IndexFamily::DepthwiseM2O, 1).nonlinear(true).context(true)),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        steps,
        batch: 2,
        seed,
        augment: AugmentConfig::desk(16),
        ..TrainConfig::default()
    };
    (cfg, tcfg, SyntheticDataset::new(seed, 20, 24))
}

#[test]
fn training_is_deterministic_and_resumes_bit_identically() {
    let (cfg, tcfg, ds) = tiny_train(10, 3);
    let run = || {
        let (model, mut st) = init_state::<f32>(&cfg, 3).unwrap();
        fit(&model, &mut st, &ds, &tcfg, |_, _| true).unwrap();
        st
    };
    let a = run();
    assert_eq!(a.step, 10);
    assert_eq!(a, run());

    let (model, mut st) = init_state::<f32>(&cfg, 3).unwrap();
    fit(&model, &mut st, &ds, &tcfg, |m, _| m.step < 4).unwrap();
    assert_eq!(st.step, 5);
    let resumed = st.clone();
    let mut st = resumed;
    fit(&model, &mut st, &ds, &tcfg, |_, _| true).unwrap();
    assert_eq!(st, a);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (cfg, tcfg, ds) = tiny_train(1, 0);
    let (model, mut st) = init_state::<f64>(&cfg, 0).unwrap();
    let before = st.params.clone();
    let b = Batch::from_samples(&batch_for_step(&ds, &tcfg, 0).unwrap()).unwrap();
    train_step(&model, &mut st, &b, 0.0, &tcfg).unwrap();
    for (id, p) in before.iter() {
        if p.kind == ParamKind::Trainable {
            assert_eq!(st.params.get(id), &p.value, "{}", p.name);
        }
    }
}

#[test]
fn single_sample_overfits() {
    let cfg = ModelConfig {
        stages: 3,
        stage_channels: vec![8, 16, 32],
        pooling: PoolingMode::Index(IndexBlockConfig::new(IndexFamily::DepthwiseM2O, 1).nonlinear(true).context(true)),
        ..ModelConfig::default()
    };
    let (model, mut st) = init_state::<f32>(&cfg, 1).unwrap();
    let sample = gen_sample(&mut Rng::new(11), 32, 32, (3, 6)).unwrap();
    let b = Batch::from_samples(&[sample]).unwrap();
    let tcfg = TrainConfig {
        steps: 500,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut last = f64::INFINITY;
    for step in 0..500 {
        last = train_step(&model, &mut st, &b, tcfg.lr_at(step), &tcfg).unwrap().total;
        if last < 0.02 {
            break;
        }
    }
    assert!(last < 0.02, "loss {last}");
}

#[test]
fn fifty_sample_training_reduces_loss() {
    let (cfg, mut tcfg, _) = tiny_train(150, 5);
    tcfg.batch = 4;
    tcfg.lr = 3e-3;
    let ds = SyntheticDataset::new(5, 50, 24);
    let (model, mut st) = init_state::<f32>(&cfg, 5).unwrap();
    let mut losses = Vec::new();
    fit(&model, &mut st, &ds, &tcfg, |m, _| {
        losses.push(m.total);
        true
    })
    .unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&losses[130..]) < 0.8 * mean(&losses[..20]), "{} vs {}", mean(&losses[130..]), mean(&losses[..20]));
}

#[test]
fn single_input_matches_batch_layout() {
    let s = gen_sample(&mut Rng::new(12), 10, 6, (1, 3)).unwrap();
    let b = Batch::<f32>::from_samples(std::slice::from_ref(&s)).unwrap();
    assert_eq!(input_tensor::<f32>(&s.image, &s.trimap, 10, 6).unwrap(), b.input);
    assert!(input_tensor::<f32>(&s.image, &s.trimap, 6, 6).is_err());
}
