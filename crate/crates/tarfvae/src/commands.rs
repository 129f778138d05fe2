//! Command implementations behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tarfvae_core::data::RawSeries;
use tarfvae_core::eval::score_forecasts;
use tarfvae_core::metrics::ForecastSamples;
use tarfvae_core::model::{ModelConfig, Tarfvae};
use tarfvae_core::rng::{stream, Stream};
use tarfvae_core::synthetic::gen_series;
use tarfvae_core::train::{forecast_windows, spread_indices, train, Ablation};
use tarfvae_core::{Real, Tensor};

use crate::bench::{run_bench, BenchSpec, BenchTable};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{PrecisionSetting, RunConfig};
use crate::csvio::{load_csv, write_csv};
use crate::error::{io_err, Error, Result};
use crate::pipeline::{prepare, windows};
use crate::report::{write_band_csv, write_eval_json, write_samples_csv, write_window_csv, JsonlLog};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub ablation: Option<Ablation>,
    pub quiet: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.samples {
            cfg.eval.samples = s;
        }
        if let Some(a) = self.ablation {
            cfg.train.ablation = a;
        }
    }
}

pub fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_snapshot(cfg: &RunConfig) -> Result<()> {
    let p = cfg.out_dir.join(CONFIG_SNAPSHOT);
    fs::write(&p, cfg.to_toml()?).map_err(io_err(&p))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_score: f64,
    pub steps: u64,
    pub aborted: Option<String>,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<TrainSummary> {
    match cfg.precision {
        PrecisionSetting::F32 => train_as::<f32>(cfg, quiet),
        PrecisionSetting::F64 => train_as::<f64>(cfg, quiet),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, quiet: bool) -> Result<TrainSummary> {
    let data = prepare(cfg)?;
    let model_cfg = cfg.model.resolve(data.channels(), cfg.data.lookback, cfg.data.horizon);
    let mut model = Tarfvae::<T>::new(model_cfg.clone(), &mut stream(cfg.seed, Stream::Init))?;
    let tw = windows(&data.train, cfg)?;
    let vw = windows(&data.val, cfg)?;
    create_out(&cfg.out_dir)?;
    write_snapshot(cfg)?;
    let mut log = JsonlLog::create(&cfg.out_dir.join(TRAIN_LOG), !quiet)?;
    let outcome = train(&mut model, &tw, &vw, &cfg.train.resolve(cfg.seed), &mut log)?;
    log.finish()?;

    let mut meta = CheckpointMeta::new(model_cfg, data.stats.clone());
    meta.steps = outcome.steps;
    meta.best_epoch = outcome.best_epoch;
    meta.val_score = outcome.best_epoch.map(|_| outcome.best_score);
    meta.config = Some(cfg.to_toml()?);
    let ck_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    Checkpoint::from_model(&model, meta).save(&ck_dir)?;
    Ok(TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_score: outcome.best_score,
        steps: outcome.steps,
        aborted: outcome.aborted,
        checkpoint: ck_dir,
    })
}

/// Paths written by [`cmd_evaluate`].
#[derive(Clone, Debug)]
pub struct EvalOutputs {
    pub report: PathBuf,
    pub windows_csv: PathBuf,
    pub bands_csv: PathBuf,
    pub mse: f64,
    pub mae: f64,
    pub crps: f64,
}

pub fn cmd_evaluate(ck: &Checkpoint, cfg: &RunConfig) -> Result<EvalOutputs> {
    match cfg.precision {
        PrecisionSetting::F32 => evaluate_as::<f32>(ck, cfg),
        PrecisionSetting::F64 => evaluate_as::<f64>(ck, cfg),
    }
}

fn evaluate_as<T: Real>(ck: &Checkpoint, cfg: &RunConfig) -> Result<EvalOutputs> {
    let data = prepare(cfg)?;
    let wanted = cfg.model.resolve(data.channels(), cfg.data.lookback, cfg.data.horizon);
    ck.check_compatible(&wanted)?;
    let model: Tarfvae<T> = ck.model()?;
    let tw = windows(&data.test, cfg)?;
    let idx = spread_indices(tw.len(), cfg.eval.max_windows);
    let s = cfg.eval.samples;
    let forecasts = forecast_windows(&model, &tw, &idx, s, cfg.seed)?;
    let truths: Vec<Tensor<f64>> = idx.iter().map(|&i| tw.get(i).y).collect();
    let mut report = score_forecasts(&forecasts, &truths, &idx, &cfg.eval.quantile_levels)?;
    report.lookback = tw.lookback();

    create_out(&cfg.out_dir)?;
    write_snapshot(cfg)?;
    let out = EvalOutputs {
        report: cfg.out_dir.join(format!("eval_s{s}.json")),
        windows_csv: cfg.out_dir.join(format!("eval_s{s}_windows.csv")),
        bands_csv: cfg.out_dir.join(format!("eval_s{s}_bands.csv")),
        mse: report.mse,
        mae: report.mae,
        crps: report.crps,
    };
    write_eval_json(&out.report, &cfg.dataset_name(), &report)?;
    write_window_csv(&out.windows_csv, &report)?;
    let nb = cfg.eval.band_windows.min(idx.len());
    let band_pick = spread_indices(idx.len(), Some(nb.max(1)));
    let pick = |v: &[usize]| band_pick.iter().map(|&j| v[j]).collect::<Vec<_>>();
    write_band_csv(
        &out.bands_csv,
        &pick(&idx),
        &band_pick.iter().map(|&j| forecasts[j].clone()).collect::<Vec<_>>(),
        &band_pick.iter().map(|&j| truths[j].clone()).collect::<Vec<_>>(),
        &cfg.eval.band_levels,
    )?;
    Ok(out)
}

/// Samples for the last `L` rows of `input`, on the input's scale.
pub fn predict(ck: &Checkpoint, input: &RawSeries, samples: usize, seed: u64, precision: PrecisionSetting) -> Result<ForecastSamples> {
    let mc = &ck.meta.model;
    if input.channels() != mc.channels {
        return Err(Error::Mismatch(format!(
            "channels: checkpoint {}, input {}",
            mc.channels,
            input.channels()
        )));
    }
    if input.len() < mc.lookback {
        return Err(tarfvae_core::Error::SeriesTooShort {
            len: input.len(),
            required: mc.lookback,
        }
        .into());
    }
    let recent = input.slice(input.len() - mc.lookback, input.len());
    let x = ck.meta.stats.standardize_tensor(&recent.values)?;
    let out = match precision {
        PrecisionSetting::F32 => ck.model::<f32>()?.generate(&x, samples, seed)?,
        PrecisionSetting::F64 => ck.model::<f64>()?.generate(&x, samples, seed)?,
    };
    let stats = &ck.meta.stats;
    Ok(out.map_trajectories(|t| stats.destandardize(t))?)
}

pub fn cmd_predict(
    ck: &Checkpoint,
    input: &Path,
    samples: usize,
    seed: u64,
    precision: PrecisionSetting,
    out: &Path,
) -> Result<usize> {
    let series = load_csv(input)?;
    let f = predict(ck, &series, samples, seed, precision)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_samples_csv(out, &f)?;
    Ok(f.samples.len())
}

pub fn cmd_bench(
    base: &ModelConfig,
    ck: Option<&Checkpoint>,
    spec: &BenchSpec,
    precision: PrecisionSetting,
) -> Result<BenchTable> {
    let params = ck.map(|c| &c.params);
    match precision {
        PrecisionSetting::F32 => run_bench::<f32>(base, params, spec),
        PrecisionSetting::F64 => run_bench::<f64>(base, params, spec),
    }
}

pub fn cmd_gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("gen-synthetic needs a [data.synthetic] table".into()))?
        .to_spec(cfg.seed)?;
    let series = gen_series(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_csv(out, &series, None)?;
    Ok(series.len())
}
