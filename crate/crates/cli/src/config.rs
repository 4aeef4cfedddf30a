//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration; unknown keys and repeated keys are
//! errors.

use std::fmt::Write as _;
use std::path::Path;

use indexnet_core::indexnet::{IndexBlockConfig, IndexFamily};
use indexnet_core::mattenet::{Fusion, ModelConfig, PoolingMode, TrainConfig};
use indexnet_core::synthdata::{AugmentConfig, SyntheticDataset};

use crate::error::{io_err, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Index(IndexFamily),
    MaxPool,
    Bilinear,
}

impl Pooling {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "maxpool" => Some(Pooling::MaxPool),
            "bilinear" => Some(Pooling::Bilinear),
            other => IndexFamily::parse(other).ok().map(Pooling::Index),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Index(f) => f.name(),
            Pooling::MaxPool => "maxpool",
            Pooling::Bilinear => "bilinear",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pooling: Pooling,
    pub nonlinear: bool,
    pub context: bool,
    pub stages: usize,
    pub channels: Vec<usize>,
    pub fusion: Fusion,
    pub context_block: bool,

    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub decay_at: Vec<f64>,
    pub crop: usize,
    pub bn_momentum: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,

    pub data_seed: u64,
    pub train_count: usize,
    pub test_seed: u64,
    pub test_count: usize,
    pub size: usize,

    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Index(IndexFamily::DepthwiseM2O),
            nonlinear: true,
            context: true,
            stages: 4,
            channels: vec![16, 32, 64, 128],
            fusion: Fusion::Concat,
            context_block: true,
            seed: 0,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            decay_at: vec![0.6, 0.85],
            crop: 64,
            bn_momentum: 0.1,
            checkpoint_every: 500,
            log_every: 10,
            data_seed: 1,
            train_count: 2000,
            test_seed: 2,
            test_count: 200,
            size: 64,
            out: "run".into(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

const KEYS: &[&str] = &[
    "model.pooling",
    "model.nonlinear",
    "model.context",
    "model.stages",
    "model.channels",
    "model.fusion",
    "model.context_block",
    "train.seed",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.decay_at",
    "train.crop",
    "train.bn_momentum",
    "train.checkpoint_every",
    "train.log_every",
    "data.seed",
    "data.train_count",
    "data.test_seed",
    "data.test_count",
    "data.size",
    "paths.out",
];

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "model.pooling" => self.pooling.name().into(),
            "model.nonlinear" => self.nonlinear.to_string(),
            "model.context" => self.context.to_string(),
            "model.stages" => self.stages.to_string(),
            "model.channels" => list(&self.channels),
            "model.fusion" => match self.fusion {
                Fusion::Concat => "concat".into(),
                Fusion::None => "none".into(),
            },
            "model.context_block" => self.context_block.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.decay_at" => list(&self.decay_at),
            "train.crop" => self.crop.to_string(),
            "train.bn_momentum" => self.bn_momentum.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.train_count" => self.train_count.to_string(),
            "data.test_seed" => self.test_seed.to_string(),
            "data.test_count" => self.test_count.to_string(),
            "data.size" => self.size.to_string(),
            "paths.out" => self.out.clone(),
            _ => unreachable!("key table and getter disagree on {key}"),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("expected true or false, got {v:?}")),
            }
        }
        let bad_list = || format!("cannot parse list {value:?}");
        match key {
            "model.pooling" => {
                self.pooling = Pooling::parse(value).ok_or_else(|| {
                    format!("unknown pooling {value:?} (hin, o2o, m2o, hmi, maxpool, bilinear)")
                })?
            }
            "model.nonlinear" => self.nonlinear = flag(value)?,
            "model.context" => self.context = flag(value)?,
            "model.stages" => self.stages = num(value)?,
            "model.channels" => self.channels = parse_list(value).ok_or_else(bad_list)?,
            "model.fusion" => {
                self.fusion = match value {
                    "concat" => Fusion::Concat,
                    "none" => Fusion::None,
                    _ => return Err(format!("unknown fusion {value:?} (concat, none)")),
                }
            }
            "model.context_block" => self.context_block = flag(value)?,
            "train.seed" => self.seed = num(value)?,
            "train.steps" => self.steps = num(value)?,
            "train.batch" => self.batch = num(value)?,
            "train.lr" => self.lr = num(value)?,
            "train.decay_at" => self.decay_at = parse_list(value).ok_or_else(bad_list)?,
            "train.crop" => self.crop = num(value)?,
            "train.bn_momentum" => self.bn_momentum = num(value)?,
            "train.checkpoint_every" => self.checkpoint_every = num(value)?,
            "train.log_every" => self.log_every = num(value)?,
            "data.seed" => self.data_seed = num(value)?,
            "data.train_count" => self.train_count = num(value)?,
            "data.test_seed" => self.test_seed = num(value)?,
            "data.test_count" => self.test_count = num(value)?,
            "data.size" => self.size = num(value)?,
            "paths.out" => self.out = value.into(),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key {k:?} given twice")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies a single `key=value` override, as given on the command line.
    /// The result is not validated, so that related keys can be changed
    /// one at a time; call [`RunConfig::validate`] afterwards.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(CliError::Usage)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| CliError::Config { line: 0, msg: msg.into() };
        if self.batch == 0 || self.size == 0 || self.crop == 0 {
            return Err(err("batch, size and crop must be positive"));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(err("dataset sizes must be positive"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(err("logging and checkpoint intervals must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(err("learning rate must be finite and non-negative"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(err("decay points are fractions of the run, in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(err("batch-norm momentum must lie in [0, 1]"));
        }
        self.model_config().validate()?;
        self.train_config().augment.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let pooling = match self.pooling {
            Pooling::Index(f) => PoolingMode::Index(IndexBlockConfig::new(f, 1).nonlinear(self.nonlinear).context(self.context)),
            Pooling::MaxPool => PoolingMode::MaxPoolUnpool,
            Pooling::Bilinear => PoolingMode::Bilinear,
        };
        ModelConfig {
            stages: self.stages,
            stage_channels: self.channels.clone(),
            pooling,
            fusion: self.fusion,
            context_block: self.context_block,
            input_channels: 4,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            decay_at: self.decay_at.clone(),
            seed: self.seed,
            augment: AugmentConfig::desk(self.crop),
            bn_momentum: self.bn_momentum,
            ..TrainConfig::default()
        }
    }

    pub fn train_set(&self) -> SyntheticDataset {
        SyntheticDataset::new(self.data_seed, self.train_count, self.size)
    }

    pub fn test_set(&self) -> SyntheticDataset {
        SyntheticDataset::new(self.test_seed, self.test_count, self.size)
    }
}
