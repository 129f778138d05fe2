//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tarfvae_core::data::SplitSpec;
use tarfvae_core::metrics::{default_levels, validate_levels};
use tarfvae_core::model::ModelConfig;
use tarfvae_core::synthetic::{SyntheticKind, SyntheticSpec};
use tarfvae_core::train::{Ablation, TrainConfig};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionSetting {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: PrecisionSetting,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV file; relative paths resolve against the config file's directory.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    /// Dataset name; names starting with `ETT` select the 0.6/0.2/0.2 split.
    pub name: Option<String>,
    #[serde(default = "default_window")]
    pub lookback: usize,
    #[serde(default = "default_window")]
    pub horizon: usize,
    pub split: Option<SplitSpec>,
}

fn default_window() -> usize {
    96
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    /// `ar1` or `sine_noise`.
    pub kind: String,
    pub length: usize,
    pub channels: usize,
    pub sigma: f64,
    pub phi: Option<Vec<f64>>,
    pub period: Option<f64>,
    pub amplitude: Option<f64>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl SyntheticSection {
    pub fn to_spec(&self, run_seed: u64) -> Result<SyntheticSpec> {
        let kind = match self.kind.as_str() {
            "ar1" => SyntheticKind::Ar1 {
                phi: self
                    .phi
                    .clone()
                    .ok_or_else(|| Error::Config("data.synthetic.phi is required for ar1".into()))?,
                sigma: self.sigma,
            },
            "sine_noise" => SyntheticKind::SineNoise {
                period: self
                    .period
                    .ok_or_else(|| Error::Config("data.synthetic.period is required for sine_noise".into()))?,
                amplitude: self.amplitude.unwrap_or(1.0),
                sigma: self.sigma,
            },
            other => {
                return Err(Error::Config(format!(
                    "data.synthetic.kind `{other}` is not one of ar1, sine_noise"
                )))
            }
        };
        let spec = SyntheticSpec {
            kind,
            length: self.length,
            channels: self.channels,
            seed: self.seed.unwrap_or(run_seed),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Model hyperparameters; unset keys take the library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: Option<usize>,
    pub flow_blocks: Option<usize>,
    pub flow_layers: Option<usize>,
    pub mlp_blocks: Option<usize>,
    pub hidden_mult: Option<usize>,
    pub heads: Option<usize>,
    pub s_max: Option<f64>,
    pub logvar_clamp: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, channels: usize, lookback: usize, horizon: usize) -> ModelConfig {
        let mut m = ModelConfig::new(channels, lookback, horizon);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        take!(latent_dim, flow_blocks, flow_layers, mlp_blocks, hidden_mult, heads, s_max, logvar_clamp);
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_sample_count: usize,
    pub ablation: Ablation,
    pub max_batches_per_epoch: Option<usize>,
    pub val_max_windows: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            val_sample_count: d.val_sample_count,
            ablation: d.ablation,
            max_batches_per_epoch: d.max_batches_per_epoch,
            val_max_windows: d.val_max_windows,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            val_sample_count: self.val_sample_count,
            ablation: self.ablation,
            max_batches_per_epoch: self.max_batches_per_epoch,
            val_max_windows: self.val_max_windows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub quantile_levels: Vec<f64>,
    /// Scores at most this many evenly spaced test windows.
    pub max_windows: Option<usize>,
    /// Windows written to the quantile-band CSV.
    pub band_windows: usize,
    pub band_levels: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 200,
            quantile_levels: default_levels(),
            max_windows: None,
            band_windows: 8,
            band_levels: vec![0.05, 0.25, 0.5, 0.75, 0.95],
        }
    }
}

impl RunConfig {
    /// Reads, resolves relative data paths against the file's directory,
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.data.path {
            let joined = match path.parent() {
                Some(base) if p.is_relative() => base.join(p),
                _ => p.clone(),
            };
            // absolute so the snapshot works from any directory
            cfg.data.path = Some(std::fs::canonicalize(&joined).unwrap_or(joined));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating paths.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.lookback == 0 || d.horizon == 0 {
            return Err(Error::Config("data.lookback and data.horizon must be at least 1".into()));
        }
        match (&d.path, &d.synthetic) {
            (Some(p), None) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("data.path `{}` does not exist", p.display())));
                }
            }
            (None, Some(s)) => {
                s.to_spec(self.seed)?;
            }
            _ => return Err(Error::Config("set exactly one of data.path and data.synthetic".into())),
        }
        self.split().validate()?;
        self.model.resolve(1, d.lookback, d.horizon).validate()?;
        self.train.resolve(self.seed).validate()?;
        if self.eval.samples < 2 {
            return Err(Error::Config("eval.samples must be at least 2".into()));
        }
        validate_levels(&self.eval.quantile_levels)
            .map_err(|e| Error::Config(format!("eval.quantile_levels: {e}")))?;
        validate_levels(&self.eval.band_levels).map_err(|e| Error::Config(format!("eval.band_levels: {e}")))?;
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        if let Some(n) = &self.data.name {
            return n.clone();
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            (None, Some(s)) => format!("synthetic-{}", s.kind),
            _ => String::new(),
        }
    }

    pub fn split(&self) -> SplitSpec {
        self.data
            .split
            .unwrap_or_else(|| SplitSpec::for_dataset(&self.dataset_name()))
    }
}
