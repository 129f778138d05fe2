//! Mini-batch ADAM training with validation-based early stopping.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{instance_normalize, Windows, NORM_EPS};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, LossBreakdown};
use crate::metrics::ForecastSamples;
use crate::model::Tarfvae;
use crate::nn::ParamStore;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::real::Real;
use crate::rng::{normal_tensor, stream, Stream};
use crate::tensor::Tensor;

pub use crate::loss::Ablation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_sample_count: usize,
    pub ablation: Ablation,
    /// Caps the number of mini-batches per epoch; `None` runs every window.
    pub max_batches_per_epoch: Option<usize>,
    /// Scores at most this many evenly spaced validation windows.
    pub val_max_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            val_sample_count: 50,
            ablation: Ablation::Full,
            max_batches_per_epoch: None,
            val_max_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.val_sample_count == 0 || self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "val_sample_count, patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Batch-weighted means of the training loss terms.
    pub train: LossBreakdown,
    pub val_score: f64,
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best_params: ParamStore<T>,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    pub steps: u64,
    pub log: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Hooks for the caller; the core has no clock of its own.
pub trait TrainObserver {
    /// Seconds since training began, if a clock is available.
    fn elapsed_seconds(&mut self) -> Option<f64> {
        None
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// Instance-normalized batch tensors for windows `idx`.
pub fn make_batch<T: Real>(windows: &Windows<'_>, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, l, h) = (windows.channels(), windows.lookback(), windows.horizon());
    let mut xs = Vec::with_capacity(idx.len() * c * l);
    let mut ys = Vec::with_capacity(idx.len() * c * h);
    for &i in idx {
        let w = windows.get(i);
        let (xn, yn, _) = instance_normalize(&w.x, Some(&w.y), NORM_EPS)?;
        xs.extend(xn.data().iter().map(|&v| T::from_f64(v)));
        ys.extend(yn.expect("y given").data().iter().map(|&v| T::from_f64(v)));
    }
    Ok((
        Tensor::new(&[idx.len(), c, l], xs)?,
        Tensor::new(&[idx.len(), c, h], ys)?,
    ))
}

/// Evenly spaced subset of `0..n` with at most `cap` entries.
pub fn spread_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n && k > 0 => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

const VALIDATE_CHUNK: usize = 32;

/// Forecasts for the windows `idx`, generated in chunks.
pub fn forecast_windows<T: Real>(
    model: &Tarfvae<T>,
    windows: &Windows<'_>,
    idx: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<ForecastSamples>> {
    let mut rng = stream(seed, Stream::Validate);
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(VALIDATE_CHUNK) {
        let xs: Vec<Tensor<f64>> = chunk.iter().map(|&i| windows.get(i).x).collect();
        out.extend(model.generate_batch(&xs, samples, &mut rng)?);
    }
    Ok(out)
}

/// Mean over windows of the MSE between the per-cell sample median and the
/// target, on the scale of the series the windows read from.
pub fn validate<T: Real>(model: &Tarfvae<T>, windows: &Windows<'_>, samples: usize, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    validate_subset(model, windows, &idx, samples, seed)
}

pub fn validate_subset<T: Real>(
    model: &Tarfvae<T>,
    windows: &Windows<'_>,
    idx: &[usize],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let forecasts = forecast_windows(model, windows, idx, samples, seed)?;
    let mut total = 0.0;
    for (f, &i) in forecasts.iter().zip(idx) {
        total += window_mse(&f.median(), &windows.get(i).y);
    }
    Ok(total / idx.len() as f64)
}

fn window_mse(pred: &Tensor<f64>, truth: &Tensor<f64>) -> f64 {
    let n = truth.len() as f64;
    pred.data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Trains `model` in place. On return `model.params` holds the best
/// validated parameters (or the initial ones if no epoch finished).
pub fn train<T: Real>(
    model: &mut Tarfvae<T>,
    train_windows: &Windows<'_>,
    val_windows: &Windows<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let val_idx = spread_indices(val_windows.len(), cfg.val_max_windows);
    if val_idx.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut noise = stream(cfg.seed, Stream::Noise);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let (chans, width) = (model.config.channels, model.config.latent_dim);

    let mut outcome = TrainOutcome {
        best_params: model.params.clone(),
        best_epoch: None,
        best_score: f64::INFINITY,
        steps: 0,
        log: Vec::new(),
        aborted: None,
    };
    let mut since_best = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let batches = order.chunks(cfg.batch_size);
        let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        for idx in batches.take(limit) {
            let (x, y) = make_batch::<T>(train_windows, idx)?;
            let eps = normal_tensor::<T, _>(&[idx.len(), chans, width], &mut noise);
            let step = loss_and_grad(model, &x, &y, &eps, cfg.ablation)
                .and_then(|(bd, grads)| adam_step(&mut model.params, &grads, &mut state, &adam).map(|_| bd));
            match step {
                Ok(bd) => {
                    sums.add_scaled(&bd, idx.len() as f64);
                    seen += idx.len();
                    outcome.steps += 1;
                }
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })) => {
                    outcome.aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&sums, 1.0 / seen.max(1) as f64);

        let score = match validate_subset(model, val_windows, &val_idx, cfg.val_sample_count, cfg.seed) {
            Ok(s) if s.is_finite() => s,
            Ok(_) => {
                outcome.aborted = Some("non-finite validation score".to_string());
                break 'epochs;
            }
            Err(e @ Error::NonFinite { .. }) => {
                outcome.aborted = Some(e.to_string());
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            steps: outcome.steps,
            train: mean,
            val_score: score,
            wall_time_s: observer.elapsed_seconds(),
        };
        observer.on_epoch(&record);
        outcome.log.push(record);

        if score < outcome.best_score {
            outcome.best_score = score;
            outcome.best_epoch = Some(epoch);
            outcome.best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = outcome.best_params.clone();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawSeries;
    use crate::model::ModelConfig;
    use crate::synthetic::{gen_series, SyntheticSpec};

    fn setup() -> (Tarfvae<f64>, RawSeries) {
        let mut cfg = ModelConfig::new(2, 8, 4);
        cfg.latent_dim = 4;
        cfg.heads = 2;
        cfg.flow_blocks = 2;
        cfg.mlp_blocks = 1;
        let model = Tarfvae::new(cfg, &mut stream(1, Stream::Init)).unwrap();
        let series = gen_series(&SyntheticSpec::ar1(0.8, 0.5, 120, 2, 3)).unwrap();
        (model, series)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            patience: 5,
            val_sample_count: 4,
            max_batches_per_epoch: Some(3),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut model, series) = setup();
        let w = Windows::new(&series, 8, 4, 1).unwrap();
        let before = model.params.flatten();
        let cfg = TrainConfig { lr: 0.0, ..quick() };
        let out = train(&mut model, &w, &w, &cfg, &mut ()).unwrap();
        assert_eq!(model.params.flatten(), before);
        let scores: Vec<f64> = out.log.iter().map(|r| r.val_score).collect();
        assert!(scores.windows(2).all(|p| p[0] == p[1]), "{scores:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (model, series) = setup();
        let w = Windows::new(&series, 8, 4, 1).unwrap();
        let run = || {
            let mut m = model.clone();
            let out = train(&mut m, &w, &w, &quick(), &mut ()).unwrap();
            (out.log, m.params.flatten())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn singleton_median_and_fabricated_samples() {
        let f = ForecastSamples::new(Tensor::new(&[3, 1, 1], alloc::vec![0.0, 1.0, 2.0]).unwrap()).unwrap();
        let y = Tensor::new(&[1, 1], alloc::vec![1.0]).unwrap();
        assert_eq!(window_mse(&f.median(), &y), 0.0);
    }

    #[test]
    fn empty_validation_is_an_error() {
        let (model, series) = setup();
        let w = Windows::new(&series, 8, 4, 1).unwrap();
        assert_eq!(validate_subset(&model, &w, &[], 3, 0), Err(Error::EmptyValidation));
    }

    #[test]
    fn spread_indices_cases() {
        assert_eq!(spread_indices(5, None), alloc::vec![0, 1, 2, 3, 4]);
        assert_eq!(spread_indices(10, Some(5)), alloc::vec![0, 2, 4, 6, 8]);
        assert_eq!(spread_indices(3, Some(10)), alloc::vec![0, 1, 2]);
    }
}
