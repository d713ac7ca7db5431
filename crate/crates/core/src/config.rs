//! Run configuration: bundled dataset profiles deep-merged with a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitPlan;
use crate::error::{Error, Result};
use crate::layers::MlpSpec;
use crate::model::ModelDims;
use crate::trainer::{AdamConfig, TrainConfig};

pub const PROFILES: [&str; 5] = ["options", "pm25", "traffic", "chickenpox", "synthetic"];

/// Which latent sample drives the state over the conditioning window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CondLatent {
    #[default]
    Posterior,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub level: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise_scale: f64,
    pub ar_coef: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            level: 3.0,
            amplitude: 1.0,
            period: 24.0,
            noise_scale: 0.3,
            ar_coef: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; when absent the synthetic generator supplies the series.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub target: String,
    pub covariates: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// Data rows skipped after the header, before the first used row.
    pub skip_rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: usize,
    pub hidden: usize,
    pub inference_hidden: usize,
    pub prior_mlp: MlpSpec,
    pub posterior_mlp: MlpSpec,
    pub emission_mlp: MlpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    pub n_sims: usize,
    pub quantiles: Vec<f64>,
    pub cond_latent: CondLatent,
    pub cutoffs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub lstm: bool,
    pub mlp: bool,
    pub lstm_hidden: usize,
    pub lstm_epochs: usize,
    pub lstm_patience: usize,
    /// Weight layers of the regression MLP, output layer included.
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub mlp_epochs: usize,
    pub mlp_learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitPlan,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub forecast: ForecastConfig,
    pub baselines: BaselineConfig,
}

struct Row {
    train: usize,
    val: usize,
    cond: usize,
    seq: usize,
    pred: usize,
    z: usize,
    h: usize,
    g: usize,
    prior: (usize, usize),
    post: (usize, usize),
    lstm: usize,
}

fn row(profile: &str) -> Option<Row> {
    let r = match profile {
        "options" => Row { train: 300, val: 30, cond: 10, seq: 10, pred: 30, z: 50, h: 64, g: 64, prior: (4, 64), post: (4, 64), lstm: 64 },
        "pm25" => Row { train: 1200, val: 200, cond: 10, seq: 10, pred: 30, z: 50, h: 64, g: 64, prior: (4, 64), post: (4, 64), lstm: 64 },
        "traffic" => Row { train: 1000, val: 200, cond: 20, seq: 20, pred: 30, z: 30, h: 128, g: 128, prior: (4, 128), post: (4, 128), lstm: 128 },
        "chickenpox" => Row { train: 300, val: 150, cond: 10, seq: 10, pred: 30, z: 50, h: 128, g: 128, prior: (4, 128), post: (4, 128), lstm: 128 },
        "synthetic" => Row { train: 1000, val: 200, cond: 20, seq: 20, pred: 30, z: 4, h: 16, g: 16, prior: (1, 16), post: (1, 16), lstm: 16 },
        _ => return None,
    };
    Some(r)
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn data_defaults(profile: &str) -> DataConfig {
    let (target, covariates, timestamp, skip_rows): (&str, Vec<String>, Option<&str>, usize) = match profile {
        "options" => ("option_price", names(&["underlying_price"]), Some("timestamp"), 0),
        // the UCI file starts with a day of missing readings
        "pm25" => ("pm2.5", names(&["TEMP", "PRES", "Iws", "DEWP", "Ir", "Is"]), Some("No"), 24),
        "traffic" => ("traffic_volume", names(&["temp", "rain_1h", "snow_1h", "clouds_all"]), Some("date_time"), 0),
        "chickenpox" => ("BUDAPEST", names(&["PEST", "BACS", "KOMAROM", "HEVES"]), Some("Date"), 0),
        _ => ("y", names(&["sin", "cos"]), None, 0),
    };
    DataConfig {
        path: None,
        target: target.into(),
        covariates,
        timestamp: timestamp.map(str::to_string),
        skip_rows,
        synthetic: (profile == "synthetic").then(SyntheticConfig::default),
    }
}

impl RunConfig {
    /// Defaults for a bundled profile.
    pub fn profile(name: &str) -> Result<Self> {
        let r = row(name).ok_or_else(|| {
            Error::Config(format!("unknown profile `{name}`; expected one of {}", PROFILES.join(", ")))
        })?;
        Ok(RunConfig {
            profile: name.to_string(),
            seed: 0,
            data: data_defaults(name),
            split: SplitPlan {
                train: r.train,
                val: r.val,
                cond: r.cond,
                seq_len: r.seq,
                pred: r.pred,
            },
            model: ModelConfig {
                latent: r.z,
                hidden: r.h,
                inference_hidden: r.g,
                prior_mlp: r.prior.into(),
                posterior_mlp: r.post.into(),
                emission_mlp: r.post.into(),
            },
            training: TrainingConfig {
                epochs: 300,
                patience: 30,
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                clip_norm: 10.0,
            },
            forecast: ForecastConfig {
                n_sims: 500,
                quantiles: vec![0.05, 0.5, 0.95],
                cond_latent: CondLatent::Posterior,
                cutoffs: crate::metrics::DEFAULT_CUTOFFS.to_vec(),
            },
            baselines: BaselineConfig {
                lstm: true,
                mlp: true,
                lstm_hidden: r.lstm,
                lstm_epochs: 300,
                lstm_patience: 30,
                mlp_layers: 3,
                mlp_width: 5,
                mlp_epochs: 2000,
                mlp_learning_rate: 1e-2,
            },
        })
    }

    /// Parses `text` over the defaults of its profile. The profile comes from
    /// `profile_override`, else the file's `profile` key, else `synthetic`.
    pub fn from_toml_str(text: &str, profile_override: Option<&str>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        let name = match (profile_override, user.get("profile")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::Config("profile must be a string".into())),
            (None, None) => "synthetic".to_string(),
        };
        let base = Self::profile(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(format!("profile {name}: {e}")))?;
        deep_merge(&mut merged, user);
        merged.insert("profile".into(), toml::Value::String(name));
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message().trim())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative dataset paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>, profile_override: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, profile_override)?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.data.path.is_none() && self.data.synthetic.is_none() {
            return Err(Error::Config("data.path is required unless data.synthetic is set".into()));
        }
        if self.data.covariates.is_empty() {
            return Err(Error::Config("data.covariates must name at least one column".into()));
        }
        if let Some(s) = &self.data.synthetic {
            if !(s.period > 0.0) {
                return Err(Error::Config("data.synthetic.period must be positive".into()));
            }
            if !(s.ar_coef.abs() < 1.0) {
                return Err(Error::Config("data.synthetic.ar_coef must lie in (-1, 1)".into()));
            }
            if self.data.path.is_none() && self.data.covariates.len() != 2 {
                return Err(Error::Config("data.covariates must name two phase columns for synthetic data".into()));
            }
        }
        self.model_dims(self.data.covariates.len()).validate()?;
        self.train_config().validate()?;
        let t = &self.training;
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("training.{name} must lie in [0, 1)")));
            }
        }
        if !(t.eps > 0.0) {
            return Err(Error::Config("training.eps must be positive".into()));
        }
        if t.clip_norm < 0.0 {
            return Err(Error::Config("training.clip_norm must be non-negative".into()));
        }
        let f = &self.forecast;
        if f.n_sims == 0 {
            return Err(Error::Config("forecast.n_sims must be positive".into()));
        }
        if f.quantiles.is_empty() || f.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::Config("forecast.quantiles must lie in (0, 1)".into()));
        }
        if f.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("forecast.quantiles must be strictly increasing".into()));
        }
        if f.cutoffs.is_empty() || f.cutoffs.iter().any(|&k| k == 0 || k > self.split.pred) {
            return Err(Error::Config(format!("forecast.cutoffs must lie in 1..={}", self.split.pred)));
        }
        let b = &self.baselines;
        for (name, v) in [
            ("lstm_hidden", b.lstm_hidden),
            ("lstm_epochs", b.lstm_epochs),
            ("lstm_patience", b.lstm_patience),
            ("mlp_layers", b.mlp_layers),
            ("mlp_width", b.mlp_width),
            ("mlp_epochs", b.mlp_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("baselines.{name} must be positive")));
            }
        }
        if !(b.mlp_learning_rate > 0.0) {
            return Err(Error::Config("baselines.mlp_learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn model_dims(&self, covariates: usize) -> ModelDims {
        let m = &self.model;
        ModelDims {
            covariates,
            latent: m.latent,
            hidden: m.hidden,
            inference_hidden: m.inference_hidden,
            prior_mlp: m.prior_mlp,
            posterior_mlp: m.posterior_mlp,
            emission_mlp: m.emission_mlp,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.training.learning_rate,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            eps: self.training.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dims: self.model_dims(self.data.covariates.len()),
            epochs: self.training.epochs,
            patience: self.training.patience,
            clip_norm: (self.training.clip_norm > 0.0).then_some(self.training.clip_norm),
            adam: self.adam(),
            seed: self.seed,
        }
    }

    /// Rejects a checkpoint whose model section differs from this run's.
    pub fn check_compatible(&self, checkpoint: &RunConfig) -> Result<()> {
        let mine = self.model_dims(self.data.covariates.len());
        let theirs = checkpoint.model_dims(checkpoint.data.covariates.len());
        if mine != theirs {
            return Err(Error::Compatibility {
                checkpoint: theirs.to_string(),
                config: mine.to_string(),
            });
        }
        Ok(())
    }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
