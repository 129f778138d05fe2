//! Dataset-level scoring of sampled forecasts.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Windows;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{ForecastSamples, QuantileCrps};
use crate::model::Tarfvae;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{forecast_windows, spread_indices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
    pub crps: f64,
}

/// Scores of one `(window, channel)` pair averaged over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub window: usize,
    pub channel: usize,
    pub mse: f64,
    pub mae: f64,
    pub crps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lookback: usize,
    pub horizon: usize,
    pub samples: usize,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub crps: f64,
    pub per_horizon: Vec<HorizonMetrics>,
    #[serde(skip)]
    pub rows: Vec<CellRow>,
}

/// Scores forecasts against targets (`[C, H]` each, same scale). `ids`
/// labels the rows.
pub fn score_forecasts(
    forecasts: &[ForecastSamples],
    truths: &[Tensor<f64>],
    ids: &[usize],
    levels: &[f64],
) -> Result<EvalReport> {
    if forecasts.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if forecasts.len() != truths.len() || ids.len() != truths.len() {
        return Err(shape_err(
            "score_forecasts",
            format!("{} forecasts, {} targets, {} ids", forecasts.len(), truths.len(), ids.len()),
        ));
    }
    let crps = QuantileCrps::new(levels)?;
    let (s, c, h) = (
        forecasts[0].sample_count(),
        forecasts[0].channels(),
        forecasts[0].horizon(),
    );
    if s < 2 {
        return Err(Error::TooFewSamples { required: 2, got: s });
    }
    let mut per_h = vec![[0.0f64; 3]; h];
    let mut rows = Vec::with_capacity(forecasts.len() * c);
    for ((f, y), &id) in forecasts.iter().zip(truths).zip(ids) {
        if f.samples.shape() != [s, c, h] || y.shape() != [c, h] {
            return Err(shape_err(
                "score_forecasts",
                format!("forecast {:?}, target {:?}", f.samples.shape(), y.shape()),
            ));
        }
        let med = f.median();
        for ch in 0..c {
            let mut row = [0.0f64; 3];
            for t in 0..h {
                let truth = y.data()[ch * h + t];
                let e = med.data()[ch * h + t] - truth;
                let mut cell = f.cell(ch, t);
                let score = crps.score_samples(&mut cell, truth);
                let vals = [e * e, e.abs(), score];
                for k in 0..3 {
                    row[k] += vals[k];
                    per_h[t][k] += vals[k];
                }
            }
            rows.push(CellRow {
                window: id,
                channel: ch,
                mse: row[0] / h as f64,
                mae: row[1] / h as f64,
                crps: row[2] / h as f64,
            });
        }
    }
    let per_cell = (forecasts.len() * c) as f64;
    let per_horizon: Vec<HorizonMetrics> = per_h
        .iter()
        .enumerate()
        .map(|(t, v)| HorizonMetrics {
            step: t + 1,
            mse: v[0] / per_cell,
            mae: v[1] / per_cell,
            crps: v[2] / per_cell,
        })
        .collect();
    let mean = |k: usize| per_h.iter().map(|v| v[k]).sum::<f64>() / (per_cell * h as f64);
    Ok(EvalReport {
        lookback: 0,
        horizon: h,
        samples: s,
        windows: forecasts.len(),
        mse: mean(0),
        mae: mean(1),
        crps: mean(2),
        per_horizon,
        rows,
    })
}

/// Generates and scores forecasts for (up to `max_windows` evenly spaced)
/// windows. Windows must read from the metric-scale series.
pub fn evaluate_windows<T: Real>(
    model: &Tarfvae<T>,
    windows: &Windows<'_>,
    samples: usize,
    levels: &[f64],
    seed: u64,
    max_windows: Option<usize>,
) -> Result<EvalReport> {
    let idx = spread_indices(windows.len(), max_windows);
    if idx.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let forecasts = forecast_windows(model, windows, &idx, samples, seed)?;
    let truths: Vec<Tensor<f64>> = idx.iter().map(|&i| windows.get(i).y).collect();
    let mut report = score_forecasts(&forecasts, &truths, &idx, levels)?;
    report.lookback = windows.lookback();
    Ok(report)
}
