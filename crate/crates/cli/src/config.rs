//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration; unknown or repeated
//! keys are rejected. [`RunConfig::render`] prints every key in a fixed
//! order and is what `vade config` shows.

use std::path::{Path, PathBuf};

use vade::datio::LabelColumn;
use vade::model::TrainConfig;
use vade::nets::{Activation, ObsKind};

use crate::error::CliError;

/// How to read the `data` path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// `.csv` files are CSV, everything else IDX.
    Auto,
    Csv,
    Idx,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Auto => "auto",
            DataFormat::Csv => "csv",
            DataFormat::Idx => "idx",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(DataFormat::Auto),
            "csv" => Some(DataFormat::Csv),
            "idx" => Some(DataFormat::Idx),
            _ => None,
        }
    }

    pub fn resolve(self, path: &Path) -> DataFormat {
        match self {
            DataFormat::Auto if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => DataFormat::Csv,
            DataFormat::Auto => DataFormat::Idx,
            other => other,
        }
    }
}

pub fn parse_label_column(s: &str) -> Option<Option<LabelColumn>> {
    match s {
        "none" => Some(None),
        "last" => Some(Some(LabelColumn::Last)),
        _ => s.parse().ok().map(|i| Some(LabelColumn::Index(i))),
    }
}

pub fn label_column_name(c: Option<LabelColumn>) -> String {
    match c {
        None => "none".into(),
        Some(LabelColumn::Last) => "last".into(),
        Some(LabelColumn::Index(i)) => i.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub format: DataFormat,
    pub label_column: Option<LabelColumn>,
    /// Keep only the first `limit` rows; 0 keeps everything.
    pub limit: usize,
    /// `None` picks Bernoulli for `[0, 1]` image data and Gaussian otherwise.
    pub obs: Option<ObsKind>,
    pub clusters: usize,
    pub latent: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mc_samples: usize,
    pub binarize: bool,
    pub standardize: bool,
    pub restarts: usize,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            labels: None,
            format: DataFormat::Auto,
            label_column: None,
            limit: 0,
            obs: None,
            clusters: 10,
            latent: 10,
            hidden: vec![500, 500, 2000],
            activation: Activation::Relu,
            mc_samples: 1,
            binarize: false,
            standardize: false,
            restarts: 1,
            out: PathBuf::from("vade-out"),
            train: TrainConfig::default(),
        }
    }
}

const KEYS: [&str; 28] = [
    "data",
    "labels",
    "format",
    "label_column",
    "limit",
    "obs",
    "k",
    "latent",
    "hidden",
    "activation",
    "mc_samples",
    "binarize",
    "standardize",
    "restarts",
    "out",
    "seed",
    "epochs",
    "pretrain_epochs",
    "learning_rate",
    "decay_rate",
    "decay_every",
    "batch_size",
    "gmm_inits",
    "variance_floor",
    "prob_clamp",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("key `{key}`: expected true or false, found {value:?}"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults overridden by the contents of a config file.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{}:{}", origin.display(), i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{at}: expected key=value, found {line:?}")))?;
            let key = key.trim();
            if let Some(known) = KEYS.iter().find(|k| **k == key) {
                if seen.contains(known) {
                    return Err(CliError::Config(format!("{at}: key `{key}` given twice")));
                }
                seen.push(known);
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{at}: {m}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, path)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "data" => self.data = path(value),
            "labels" => self.labels = path(value),
            "format" => {
                self.format = DataFormat::from_name(value)
                    .ok_or_else(|| CliError::Config(format!("key `format`: expected auto, csv or idx, found {value:?}")))?
            }
            "label_column" => {
                self.label_column = parse_label_column(value).ok_or_else(|| {
                    CliError::Config(format!("key `label_column`: expected none, last or an index, found {value:?}"))
                })?
            }
            "limit" => self.limit = num(key, value)?,
            "obs" => {
                self.obs = match value {
                    "auto" => None,
                    _ => Some(ObsKind::from_name(value).ok_or_else(|| {
                        CliError::Config(format!("key `obs`: expected auto, bernoulli or gaussian, found {value:?}"))
                    })?),
                }
            }
            "k" => self.clusters = num(key, value)?,
            "latent" => self.latent = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_, _>>()?
            }
            "activation" => {
                self.activation = Activation::from_name(value).ok_or_else(|| {
                    CliError::Config(format!("key `activation`: expected relu, tanh or sigmoid, found {value:?}"))
                })?
            }
            "mc_samples" => self.mc_samples = num(key, value)?,
            "binarize" => self.binarize = flag(key, value)?,
            "standardize" => self.standardize = flag(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "seed" => t.seed = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "decay_rate" => t.decay_rate = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "gmm_inits" => t.gmm_inits = num(key, value)?,
            "variance_floor" => t.variance_floor = num(key, value)?,
            "prob_clamp" => t.prob_clamp = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_epsilon" => t.adam_epsilon = num(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.clusters == 0 {
            return bad("k must be at least 1");
        }
        if self.latent == 0 {
            return bad("latent must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        self.train.validate().map_err(CliError::from)
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let t = &self.train;
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let values = [
            opt(&self.data),
            opt(&self.labels),
            self.format.name().into(),
            label_column_name(self.label_column),
            self.limit.to_string(),
            self.obs.map_or("auto", ObsKind::name).into(),
            self.clusters.to_string(),
            self.latent.to_string(),
            hidden.join(","),
            self.activation.name().into(),
            self.mc_samples.to_string(),
            self.binarize.to_string(),
            self.standardize.to_string(),
            self.restarts.to_string(),
            self.out.display().to_string(),
            t.seed.to_string(),
            t.epochs.to_string(),
            t.pretrain_epochs.to_string(),
            t.learning_rate.to_string(),
            t.decay_rate.to_string(),
            t.decay_every.to_string(),
            t.batch_size.to_string(),
            t.gmm_inits.to_string(),
            t.variance_floor.to_string(),
            t.prob_clamp.to_string(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_epsilon.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
