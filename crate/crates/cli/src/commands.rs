use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use indexnet_core::gradcheck::GradcheckConfig;
use indexnet_core::gradsuite::{self, NamedReport};
use indexnet_core::indexnet::IndexFamily;
use indexnet_core::mattenet::{
    export_index_maps, finalize_alpha, fit, init_state, input_tensor, predict, trace_index_maps, Model, TrainState,
};
use indexnet_core::metrics::{evaluate, MetricReport};
use indexnet_core::synthdata::{is_unknown, SyntheticDataset};
use indexnet_core::{ParamStore, Rng, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, EvalItem};
use crate::error::{io_err, CliError, Result};
use crate::image::Image;

#[derive(Parser, Debug)]
#[command(name = "indexnet", version, about = "Learned index functions for pooling and upsampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic matting samples as PPM/PGM images.
    GenData(GenDataArgs),
    /// Train a matting network and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Score predictions on a sample directory and write a CSV report.
    Eval(EvalArgs),
    /// Predict the alpha matte of one image.
    Infer(InferArgs),
    /// Export the decoder index maps of one image as gray images.
    InspectIndices(InspectArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Time forward passes and report peak heap usage.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration; every key has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps are complete.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

/// Where to find a trained model: a checkpoint and the run configuration
/// that built it.
#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `run.cfg` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Score stored `<name>_pred.pgm` mattes instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Also store each model prediction as `<name>_pred.pgm` here.
    #[arg(long)]
    pub save_preds: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub trimap: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub trimap: PathBuf,
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ops, hin, o2o, m2o, hmi, model or all.
    #[arg(long, default_value = "all")]
    pub family: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check an operator with a deliberately wrong backward pass.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Without a checkpoint the configured model is freshly initialised.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated WIDTHxHEIGHT list.
    #[arg(long, default_value = "1920x1080")]
    pub size: String,
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    /// Fail when the peak heap exceeds this many MiB.
    #[arg(long, default_value_t = 4096)]
    pub budget_mb: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::InspectIndices(a) => inspect_indices(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Bench(a) => bench(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 || a.size == 0 {
        return Err(CliError::Usage("--count and --size must be positive".into()));
    }
    create_dir(&a.out)?;
    let ds = SyntheticDataset::new(a.seed, a.count, a.size);
    for i in 0..a.count {
        data::write_sample(&data::sample_stem(&a.out, i), &ds.sample(i)?)?;
    }
    println!("wrote {} samples of {}x{} to {}", a.count, a.size, a.size, a.out.display());
    Ok(())
}

pub const RUN_CONFIG: &str = "run.cfg";
pub const METRICS_LOG: &str = "metrics.log";
pub const LAST_CHECKPOINT: &str = "last.idxn";

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:06}.idxn")
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = &a.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out);
    create_dir(&out)?;
    let cfg_path = out.join(RUN_CONFIG);
    fs::write(&cfg_path, cfg.serialize()).map_err(io_err(&cfg_path))?;

    let tcfg = cfg.train_config();
    let (model, fresh) = init_state::<f32>(&cfg.model_config(), cfg.seed)?;
    let mut state = match &a.resume {
        Some(p) => checkpoint::load_state(p, &fresh.params)?,
        None => fresh,
    };
    let log_path = out.join(METRICS_LOG);
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
    if log.metadata().map_err(io_err(&log_path))?.len() == 0 {
        writeln!(log, "# step lr l_alpha l_comp total").map_err(io_err(&log_path))?;
    }

    let stop = a.stop_after.unwrap_or(u64::MAX).min(tcfg.steps);
    let save = |st: &TrainState<f32>| -> Result<()> {
        checkpoint::save_state(&out.join(checkpoint_name(st.step)), st)?;
        checkpoint::save_state(&out.join(LAST_CHECKPOINT), st)
    };
    let mut failure = None;
    let started = Instant::now();
    if state.step < stop {
        fit(&model, &mut state, &cfg.train_set(), &tcfg, |m, st| {
            let done = st.step;
            let step_result = (|| {
                if done % cfg.log_every == 0 || done == stop {
                    writeln!(log, "{} {:.6e} {:.6e} {:.6e} {:.6e}", done, m.lr, m.l_alpha, m.l_comp, m.total)
                        .map_err(io_err(&log_path))?;
                    if !a.quiet {
                        println!("step {done:>6}  lr {:.1e}  loss {:.5}", m.lr, m.total);
                    }
                }
                if done % cfg.checkpoint_every == 0 && done != stop {
                    save(st)?;
                }
                Ok(())
            })();
            if let Err(e) = step_result {
                failure = Some(e);
                return false;
            }
            done < stop
        })?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    save(&state)?;
    println!(
        "trained to step {} in {:.1}s; checkpoint {}",
        state.step,
        started.elapsed().as_secs_f64(),
        out.join(LAST_CHECKPOINT).display()
    );
    Ok(())
}

/// Rebuilds the model a checkpoint belongs to and loads its parameters.
pub fn load_model(checkpoint_path: &Path, config: Option<&Path>) -> Result<(Model, ParamStore<f32>)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let (model, fresh) = init_state::<f32>(&cfg.model_config(), cfg.seed)?;
    let state = checkpoint::load_state(checkpoint_path, &fresh.params)?;
    Ok((model, state.params))
}

/// The finished matte of one image, as 8-bit values.
pub fn predict_matte(model: &Model, params: &ParamStore<f32>, image: &[u8], trimap: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let input = input_tensor::<f32>(image, trimap, h, w)?;
    let alpha = predict(model, params, &input)?;
    Ok(finalize_alpha(alpha.data(), trimap)?.iter().map(|&a| (a * 255.0).round() as u8).collect())
}

fn unit(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&x| x as f64 / 255.0).collect()
}

pub fn score(item: &EvalItem, pred: &[u8]) -> Result<MetricReport> {
    let mask: Vec<bool> = item.trimap.iter().map(|&t| is_unknown(t)).collect();
    Ok(evaluate(&unit(pred), &unit(&item.alpha), &mask, item.height, item.width)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let items = data::read_dir(&a.data)?;
    let model = match &a.checkpoint {
        Some(ck) => Some(load_model(ck, a.config.as_deref())?),
        None => None,
    };
    if let Some(dir) = &a.save_preds {
        create_dir(dir)?;
    }
    let mut rows = Vec::with_capacity(items.len());
    for item in &items {
        let pred = match (&model, &a.predictions) {
            (Some((m, p)), _) => predict_matte(m, p, &item.image, &item.trimap, item.height, item.width)?,
            (None, Some(dir)) => {
                let path = dir.join(format!("{}_pred.pgm", item.name));
                let img = Image::read_expect(&path, 1)?;
                if (img.width, img.height) != (item.width, item.height) {
                    return Err(CliError::Image { path, msg: "prediction size differs from the image".into() });
                }
                img.data
            }
            (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --predictions".into())),
        };
        if let (Some(dir), Some(_)) = (&a.save_preds, &model) {
            Image::gray(item.width, item.height, pred.clone()).write(&dir.join(format!("{}_pred.pgm", item.name)))?;
        }
        rows.push((item.name.clone(), score(item, &pred)?));
    }

    let mut csv = String::from("name,sad,sad_k,mse,grad,conn,unknown_pixels,conn_fallback\n");
    let n = rows.len() as f64;
    let mut mean = [0.0; 6];
    let mut fallbacks = 0;
    for (name, r) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            r.sad, r.sad_k, r.mse, r.grad, r.conn, r.unknown_pixel_count, r.conn_fallback as u8
        ));
        for (m, v) in mean.iter_mut().zip([r.sad, r.sad_k, r.mse, r.grad, r.conn, r.unknown_pixel_count as f64]) {
            *m += v / n;
        }
        fallbacks += r.conn_fallback as usize;
    }
    csv.push_str(&format!(
        "mean,{},{},{},{},{},{},{}\n",
        mean[0], mean[1], mean[2], mean[3], mean[4], mean[5], fallbacks
    ));
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.report, csv).map_err(io_err(&a.report))?;
    println!(
        "{} samples: SAD/1000 {:.4}  MSE {:.6}  Grad {:.4}  Conn {:.4}",
        rows.len(),
        mean[1],
        mean[2],
        mean[3],
        mean[4]
    );
    if fallbacks > 0 {
        eprintln!("warning: {fallbacks} samples had no jointly opaque region; their Conn is the SAD fallback");
    }
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (model, params) = load_model(&a.model.checkpoint, a.model.config.as_deref())?;
    let (img, trimap) = data::read_pair(&a.image, &a.trimap)?;
    let matte = predict_matte(&model, &params, &img.data, &trimap, img.height, img.width)?;
    Image::gray(img.width, img.height, matte).write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn inspect_indices(a: &InspectArgs) -> Result<()> {
    let (model, params) = load_model(&a.model.checkpoint, a.model.config.as_deref())?;
    let (img, trimap) = data::read_pair(&a.image, &a.trimap)?;
    let input = input_tensor::<f32>(&img.data, &trimap, img.height, img.width)?;
    let maps = export_index_maps(&trace_index_maps(&model, &params, &input)?)?;
    create_dir(&a.outdir)?;
    for (s, m) in maps.iter().enumerate() {
        let path = a.outdir.join(format!("stage{s}_decoder.pgm"));
        Image::gray(m.width, m.height, m.data.clone()).write(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn report_line(r: &NamedReport) -> String {
    let verdict = if r.report.passed() { "ok  " } else { "FAIL" };
    let skipped = match r.report.skipped() {
        0 => String::new(),
        n => format!(" ({n} probes on kinks skipped)"),
    };
    format!("{verdict} {:<48} max rel err {:.3e}{skipped}", r.name, r.report.max_rel_error())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig { tol: a.tol, seed: a.seed, ..GradcheckConfig::default() };
    let mut reports = Vec::new();
    let all = a.family == "all";
    if all || a.family == "ops" {
        reports.extend(gradsuite::op_checks(cfg)?);
    }
    for family in IndexFamily::ALL {
        if all || a.family == family.name() {
            reports.extend(gradsuite::family_checks(family, cfg)?);
        }
    }
    if all || a.family == "model" {
        let model_cfg = GradcheckConfig { max_probes: 8, ..cfg };
        for mode in gradsuite::model_check_modes() {
            reports.push(gradsuite::model_check(mode, model_cfg)?);
        }
    }
    if a.inject_fault {
        reports.push(gradsuite::injected_fault_check(cfg)?);
    }
    if reports.is_empty() {
        return Err(CliError::Usage(format!(
            "unknown family {:?} (ops, hin, o2o, m2o, hmi, model, all)",
            a.family
        )));
    }
    for r in &reports {
        println!("{}", report_line(r));
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.report.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("{} checks passed at tol {:e}", reports.len(), a.tol);
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{} of {} gradient checks failed: {}", failed.len(), reports.len(), failed.join(", "))))
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    s.split_once('x')
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
        .filter(|&(w, h)| w > 0 && h > 0)
        .ok_or_else(|| CliError::Usage(format!("size {s:?} is not WIDTHxHEIGHT")))
}

/// A deterministic busy test pattern: noise image with a trimap band.
fn bench_input(w: usize, h: usize) -> Tensor<f32> {
    let mut rng = Rng::new(0x6265_6e63);
    let image: Vec<u8> = (0..3 * w * h).map(|_| rng.below(256) as u8).collect();
    let trimap: Vec<u8> = (0..w * h)
        .map(|i| match (i % w) * 3 / w {
            0 => 0,
            1 => 128,
            _ => 255,
        })
        .collect();
    input_tensor(&image, &trimap, h, w).expect("sizes agree by construction")
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.iters == 0 {
        return Err(CliError::Usage("--iters must be positive".into()));
    }
    let sizes = a.size.split(',').map(parse_size).collect::<Result<Vec<_>>>()?;
    let (model, params) = match &a.checkpoint {
        Some(ck) => load_model(ck, a.config.as_deref())?,
        None => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let (model, st) = init_state::<f32>(&cfg.model_config(), cfg.seed)?;
            (model, st.params)
        }
    };
    if !crate::alloc::is_active() {
        eprintln!("warning: heap counting is not active in this binary; peak bytes read as zero");
    }
    let budget = a.budget_mb as u64 * 1024 * 1024;
    let mut over = Vec::new();
    for (w, h) in sizes {
        let input = bench_input(w, h);
        let mut times = Vec::with_capacity(a.iters);
        let mut peak = 0;
        for _ in 0..a.iters {
            crate::alloc::reset_peak();
            let t = Instant::now();
            let alpha = predict(&model, &params, &input)?;
            times.push(t.elapsed().as_secs_f64());
            peak = peak.max(crate::alloc::peak_bytes());
            drop(alpha);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        println!(
            "size={w}x{h} iters={} mean_s={mean:.3} min_s={:.3} peak_bytes={peak} peak_mib={:.1} budget_mib={}",
            a.iters,
            times.iter().cloned().fold(f64::INFINITY, f64::min),
            peak as f64 / (1024.0 * 1024.0),
            a.budget_mb
        );
        if peak as u64 > budget {
            over.push(format!("{w}x{h} peaked at {peak} bytes"));
        }
    }
    if over.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("memory budget of {} MiB exceeded: {}", a.budget_mb, over.join("; "))))
    }
}
