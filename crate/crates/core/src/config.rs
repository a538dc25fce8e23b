//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown and repeated
//! keys are errors. Every key has a default, listed in [`ExperimentConfig::default`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::algorithms::{BetaPolicy, EngineParams, EngineRegistry, LocalTraining, RoundSettings};
use crate::channel::{self, ChannelConfig, CsiMode, FadingMode, DEFAULT_DEEP_FADE_THRESHOLD};
use crate::error::{Error, Result};

/// Environment variable pointing at the directory holding the MNIST files.
pub const DATA_DIR_ENV: &str = "AIRFL_DATA_DIR";
/// Directory tried, relative to the working directory, when neither is set.
pub const DEFAULT_DATA_DIR: &str = "data/mnist-subset";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown dataset `{other}` (mnist | synthetic)")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub features: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub separation: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: String,
    pub dataset: DatasetKind,
    /// Overrides `AIRFL_DATA_DIR` when set.
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training images (0 = all).
    pub train_limit: usize,
    pub synthetic: SyntheticSpec,
    pub clients: usize,
    pub rounds: usize,
    pub eta: f64,
    pub labels_per_client: usize,
    pub snr_db: f64,
    pub sigma_h2: f64,
    pub sigma_est2: f64,
    pub power: f64,
    pub channel_mode: FadingMode,
    pub csi: CsiMode,
    pub tau_min: usize,
    pub tau_max: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub beta: BetaPolicy,
    pub deep_fade_threshold: f64,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    /// Probe count for the constants behind the per-run bound (0 disables).
    pub bound_probes: usize,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: "charles".into(),
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_limit: 0,
            synthetic: SyntheticSpec {
                features: 20,
                classes: 10,
                train_samples: 2000,
                test_samples: 500,
                separation: 3.0,
                data_seed: 0,
            },
            clients: 10,
            rounds: 200,
            eta: 0.05,
            labels_per_client: 2,
            snr_db: 10.0,
            sigma_h2: 1.0,
            sigma_est2: 0.1,
            power: 1000.0,
            channel_mode: FadingMode::Fading,
            csi: CsiMode::Imperfect,
            tau_min: 1,
            tau_max: 8,
            local_steps: 4,
            batch_size: 32,
            beta: BetaPolicy::Auto { tau_target: 4 },
            deep_fade_threshold: DEFAULT_DEEP_FADE_THRESHOLD,
            seeds: vec![1, 2, 3],
            eval_every: 10,
            bound_probes: 10,
            parallel: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Splits `key = value` lines into an ordered map, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if pairs.insert(key.clone(), value).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }
    Ok(pairs)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides on top of the current values (no validation).
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        match key {
            "algorithm" => self.algorithm = value.to_string(),
            "dataset" => self.dataset = parse_value(k, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = parse_value(k, value)?,
            "synthetic_features" => self.synthetic.features = parse_value(k, value)?,
            "synthetic_classes" => self.synthetic.classes = parse_value(k, value)?,
            "synthetic_train" => self.synthetic.train_samples = parse_value(k, value)?,
            "synthetic_test" => self.synthetic.test_samples = parse_value(k, value)?,
            "synthetic_separation" => self.synthetic.separation = parse_value(k, value)?,
            "synthetic_seed" => self.synthetic.data_seed = parse_value(k, value)?,
            "m" | "clients" => self.clients = parse_value(k, value)?,
            "T" | "rounds" => self.rounds = parse_value(k, value)?,
            "eta" => self.eta = parse_value(k, value)?,
            "p" => self.labels_per_client = parse_value(k, value)?,
            "snr_db" => self.snr_db = parse_value(k, value)?,
            "sigma_h2" => self.sigma_h2 = parse_value(k, value)?,
            "sigma_est2" => self.sigma_est2 = parse_value(k, value)?,
            "P" | "power" => self.power = parse_value(k, value)?,
            "channel" => self.channel_mode = parse_value(k, value)?,
            "csi" => self.csi = parse_value(k, value)?,
            "tau_min" => self.tau_min = parse_value(k, value)?,
            "tau_max" => self.tau_max = parse_value(k, value)?,
            "H" | "local_steps" => self.local_steps = parse_value(k, value)?,
            "batch_size" => self.batch_size = parse_value(k, value)?,
            "beta" => {
                self.beta = match value {
                    "auto" => BetaPolicy::Auto {
                        tau_target: match self.beta {
                            BetaPolicy::Auto { tau_target } => tau_target,
                            BetaPolicy::Fixed(_) => 4,
                        },
                    },
                    v => match v.strip_prefix("fixed:") {
                        Some(c) => BetaPolicy::Fixed(parse_value(k, c)?),
                        None => return Err(Error::config(k, "expected `auto` or `fixed:<value>`")),
                    },
                }
            }
            "tau_target" => {
                let tau_target = parse_value(k, value)?;
                if let BetaPolicy::Auto { .. } = self.beta {
                    self.beta = BetaPolicy::Auto { tau_target };
                }
            }
            "deep_fade_threshold" => self.deep_fade_threshold = parse_value(k, value)?,
            "seeds" => self.seeds = parse_list(k, value)?,
            "eval_every" => self.eval_every = parse_value(k, value)?,
            "bound_probes" => self.bound_probes = parse_value(k, value)?,
            "parallel" => self.parallel = parse_value(k, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::config(field, msg));
        if !EngineRegistry::default().contains(&self.algorithm) {
            return fail("algorithm", "expected charles, cotaf or fedavg");
        }
        if self.clients == 0 {
            return fail("m", "need at least one client");
        }
        if self.rounds == 0 {
            return fail("T", "need at least one round");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return fail("eta", "must be positive");
        }
        if self.labels_per_client == 0 {
            return fail("p", "must be at least 1");
        }
        if self.snr_db.is_nan() {
            return fail("snr_db", "must be a number (inf gives a noiseless channel)");
        }
        if !(self.sigma_h2 >= 0.0) || !self.sigma_h2.is_finite() {
            return fail("sigma_h2", "must be finite and >= 0");
        }
        if !(self.sigma_est2 >= 0.0) || !self.sigma_est2.is_finite() {
            return fail("sigma_est2", "must be finite and >= 0");
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return fail("P", "must be positive");
        }
        if self.tau_min == 0 || self.tau_min > self.tau_max {
            return fail("tau_min", "need 1 <= tau_min <= tau_max");
        }
        if self.local_steps == 0 {
            return fail("H", "must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        match self.beta {
            BetaPolicy::Fixed(c) if !(c > 0.0) || !c.is_finite() => {
                return fail("beta", "fixed value must be positive")
            }
            BetaPolicy::Auto { tau_target: 0 } => return fail("tau_target", "must be at least 1"),
            _ => {}
        }
        if self.seeds.is_empty() {
            return fail("seeds", "need at least one seed");
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be at least 1");
        }
        if self.bound_probes != 0 && self.bound_probes < 10 {
            return fail("bound_probes", "use 0 (disabled) or at least 10");
        }
        let s = &self.synthetic;
        if self.dataset == DatasetKind::Synthetic
            && (s.features == 0
                || s.classes == 0
                || s.train_samples < s.classes
                || s.test_samples == 0)
        {
            return fail(
                "synthetic_*",
                "need features, classes >= 1 and a sample per class",
            );
        }
        Ok(())
    }

    pub fn engine_params(&self) -> EngineParams {
        EngineParams {
            beta_policy: self.beta,
        }
    }

    /// Round settings for a model of dimension `d`.
    pub fn round_settings(&self, d: usize) -> Result<RoundSettings> {
        let sigma_c2 = channel::calibrate_noise(self.power, self.snr_db, d)?;
        Ok(RoundSettings {
            training: LocalTraining {
                eta: self.eta,
                batch_size: self.batch_size,
                tau_min: self.tau_min,
                tau_max: self.tau_max,
                local_steps: self.local_steps,
            },
            power: self.power,
            channel: ChannelConfig {
                sigma_h2: self.sigma_h2,
                sigma_est2: self.sigma_est2,
                sigma_c2,
                mode: self.channel_mode,
                csi: self.csi,
            },
            deep_fade_threshold: self.deep_fade_threshold,
            parallel: self.parallel,
        })
    }

    /// `data_dir`, else `$AIRFL_DATA_DIR`, else `data/mnist-subset` when it exists.
    pub fn data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .or_else(|| {
                let fallback = PathBuf::from(DEFAULT_DATA_DIR);
                fallback.is_dir().then_some(fallback)
            })
    }
}
