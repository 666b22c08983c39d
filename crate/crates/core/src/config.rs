//! Model and training configuration, read from flat `key = value` text.
//!
//! Keys use the symbol names of the model description (`M`, `s`, `C_d`,
//! `N_G`, ...). Lines starting with `#` are comments. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hdca::HdcaConfig;
use crate::tensor::DType;

/// Standard rate-distortion trade-off set, lowest rate first.
pub const LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.05];

/// Which entropy-model modules are instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Single-level dictionary, shallow estimators.
    Baseline,
    /// Hierarchical dictionaries, shallow estimators.
    Hd,
    /// Single-level dictionary, context-aware estimators.
    Cape,
    /// Hierarchical dictionaries and context-aware estimators.
    Hide,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Hd, Variant::Cape, Variant::Hide];

    pub fn hierarchical(self) -> bool {
        matches!(self, Variant::Hd | Variant::Hide)
    }

    pub fn context_aware(self) -> bool {
        matches!(self, Variant::Cape | Variant::Hide)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Hd => "hd",
            Variant::Cape => "cape",
            Variant::Hide => "hide",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "hd" | "+hd" => Ok(Variant::Hd),
            "cape" | "+cape" => Ok(Variant::Cape),
            "hide" | "hd+cape" => Ok(Variant::Hide),
            other => Err(Error::Config(format!("unknown variant {other:?}; expected baseline, hd, cape or hide"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Latent channels.
    pub m: usize,
    /// Number of channel slices.
    pub s: usize,
    pub hyper_channels: usize,
    pub c_ctx: usize,
    pub c_d: usize,
    pub n_g: usize,
    pub n_d: usize,
    pub heads: usize,
    pub tie_temperatures: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Width of the analysis/synthesis transforms.
    pub backbone_channels: usize,
    pub precision: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Hide,
            m: 32,
            s: 4,
            hyper_channels: 16,
            c_ctx: 64,
            c_d: 128,
            n_g: 64,
            n_d: 64,
            heads: 4,
            tie_temperatures: false,
            sigma_min: crate::cape::SIGMA_MIN,
            sigma_max: crate::cape::SIGMA_MAX,
            lambda: 0.0035,
            seed: 0,
            backbone_channels: 32,
            precision: DType::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M", self.m),
            ("s", self.s),
            ("hyper_channels", self.hyper_channels),
            ("C_ctx", self.c_ctx),
            ("backbone_channels", self.backbone_channels),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.m % self.s != 0 {
            return Err(Error::Config(format!("M = {} is not divisible by s = {}", self.m, self.s)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!("invalid sigma bounds [{}, {}]", self.sigma_min, self.sigma_max)));
        }
        if self.sigma_min < crate::cape::SIGMA_MIN || self.sigma_max > crate::cape::SIGMA_MAX {
            return Err(Error::Config(format!(
                "sigma bounds must lie within the coder's range [{}, {}]",
                crate::cape::SIGMA_MIN,
                crate::cape::SIGMA_MAX
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.hdca().validate()
    }

    /// Channels per slice.
    pub fn split(&self) -> Vec<usize> {
        vec![self.m / self.s; self.s]
    }

    pub fn hdca(&self) -> HdcaConfig {
        HdcaConfig {
            c_ctx: self.c_ctx,
            c_d: self.c_d,
            heads: self.heads,
            n_g: self.n_g,
            n_d: self.n_d,
            tie_temperatures: self.tie_temperatures,
        }
    }

    /// Position of `lambda` in [`LAMBDAS`], if it is one of them.
    pub fn lambda_index(&self) -> Option<usize> {
        LAMBDAS.iter().position(|&l| (l - self.lambda).abs() < 1e-12)
    }

    /// Canonical text form; also the input to the model hash.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("M", self.m.to_string()),
            ("s", self.s.to_string()),
            ("hyper_channels", self.hyper_channels.to_string()),
            ("C_ctx", self.c_ctx.to_string()),
            ("C_d", self.c_d.to_string()),
            ("N_G", self.n_g.to_string()),
            ("N_D", self.n_d.to_string()),
            ("heads", self.heads.to_string()),
            ("tie_temperatures", self.tie_temperatures.to_string()),
            ("sigma_min", self.sigma_min.to_string()),
            ("sigma_max", self.sigma_max.to_string()),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("backbone_channels", self.backbone_channels.to_string()),
            ("precision", self.precision.name().to_string()),
        ]
    }

    /// Applies one key; returns `false` when the key is not a model key.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => self.variant = value.parse()?,
            "M" => self.m = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "hyper_channels" => self.hyper_channels = parse(key, value)?,
            "C_ctx" => self.c_ctx = parse(key, value)?,
            "C_d" => self.c_d = parse(key, value)?,
            "N_G" => self.n_g = parse(key, value)?,
            "N_D" => self.n_d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "tie_temperatures" => self.tie_temperatures = parse(key, value)?,
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "sigma_max" => self.sigma_max = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "backbone_channels" => self.backbone_channels = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {value:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses model keys only; any other key is an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (line, k, v) in pairs(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step at which the learning rate drops by 10×; `0` disables the drop.
    pub lr_decay_step: usize,
    pub clip_norm: f64,
    pub patch_size: usize,
    pub corpus_size: usize,
    /// Steps between log records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            lr: 1e-4,
            lr_decay_step: 0,
            clip_norm: 1.0,
            patch_size: 64,
            corpus_size: 200,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_step" => self.lr_decay_step = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.corpus_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, corpus_size and log_every must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of 16", self.patch_size)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "steps = {}\nbatch_size = {}\nlr = {}\nlr_decay_step = {}\nclip_norm = {}\npatch_size = {}\ncorpus_size = {}\nlog_every = {}\n",
            self.steps,
            self.batch_size,
            self.lr,
            self.lr_decay_step,
            self.clip_norm,
            self.patch_size,
            self.corpus_size,
            self.log_every
        )
    }
}

/// A model and a training configuration read from one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (line, k, v) in pairs(text)? {
            if !cfg.model.set(&k, &v)? && !cfg.train.set(&k, &v)? {
                return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found {line:?}", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some(prev) = seen.insert(k.clone(), n + 1) {
            return Err(Error::Config(format!("line {}: {k:?} already set on line {prev}", n + 1)));
        }
        out.push((n + 1, k, v));
    }
    Ok(out)
}
