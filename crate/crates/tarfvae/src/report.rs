//! Report and log files: evaluation JSON, plot-ready CSVs, and the JSONL
//! training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tarfvae_core::eval::EvalReport;
use tarfvae_core::metrics::{quantile_sorted, ForecastSamples};
use tarfvae_core::train::{EpochRecord, TrainObserver};
use tarfvae_core::Tensor;

use crate::error::{io_err, Error, Result};

#[derive(Serialize)]
struct EvalFile<'a> {
    dataset: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn write_eval_json(path: &Path, dataset: &str, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(&EvalFile { dataset, report })?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// `window, channel, mse, mae, crps` per scored cell row.
pub fn write_window_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Quantile bands for plotting: one row per (window, channel, step) with
/// the target, the median and each requested level.
pub fn write_band_csv(
    path: &Path,
    ids: &[usize],
    forecasts: &[ForecastSamples],
    truths: &[Tensor<f64>],
    levels: &[f64],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["window", "channel", "step", "truth", "median"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(levels.iter().map(|q| format!("q{q}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for ((id, f), y) in ids.iter().zip(forecasts).zip(truths) {
        for c in 0..f.channels() {
            for h in 0..f.horizon() {
                let mut cell = f.cell(c, h);
                cell.sort_by(f64::total_cmp);
                let mut rec = vec![
                    id.to_string(),
                    c.to_string(),
                    h.to_string(),
                    y.at(&[c, h]).to_string(),
                    quantile_sorted(&cell, 0.5).to_string(),
                ];
                rec.extend(levels.iter().map(|&q| quantile_sorted(&cell, q).to_string()));
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Samples in long form: `sample_id, channel, step, value`.
pub fn write_samples_csv(path: &Path, samples: &ForecastSamples) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["sample_id", "channel", "step", "value"])
        .map_err(|e| csv_error(path, e))?;
    let (s, c, h) = (samples.sample_count(), samples.channels(), samples.horizon());
    let data = samples.samples.data();
    for i in 0..s {
        for ch in 0..c {
            for t in 0..h {
                let v = data[(i * c + ch) * h + t];
                w.write_record(&[i.to_string(), ch.to_string(), t.to_string(), v.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Streams epoch records to a JSONL file and keeps the wall clock.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
    start: Instant,
    error: Option<std::io::Error>,
    echo: bool,
}

impl JsonlLog {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            start: Instant::now(),
            error: None,
            echo,
        })
    }

    /// Flushes and reports the first write error, if any.
    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(io_err(&self.path)(e));
        }
        self.out.flush().map_err(io_err(&self.path))
    }
}

impl TrainObserver for JsonlLog {
    fn elapsed_seconds(&mut self) -> Option<f64> {
        Some(self.start.elapsed().as_secs_f64())
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        if self.echo {
            eprintln!(
                "epoch {:>3}  loss {:>12.4}  val {:.6}",
                record.epoch, record.train.total, record.val_score
            );
        }
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }
}
