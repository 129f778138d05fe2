//! Dataset loading, chronological split, and train-fitted standardization.

use tarfvae_core::data::{chronological_split, GlobalStats, RawSeries, Windows};
use tarfvae_core::synthetic::gen_series;

use crate::config::RunConfig;
use crate::csvio::load_csv;
use crate::error::{Error, Result};

/// Splits on the metric scale, plus the statistics that produced it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: GlobalStats,
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

impl Prepared {
    pub fn channels(&self) -> usize {
        self.stats.mu.len()
    }
}

pub fn load_series(cfg: &RunConfig) -> Result<RawSeries> {
    match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(p), _) => load_csv(p),
        (None, Some(s)) => Ok(gen_series(&s.to_spec(cfg.seed)?)?),
        (None, None) => Err(Error::Config("no data source".into())),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let series = load_series(cfg)?;
    let (train, val, test) = chronological_split(&series, &cfg.split(), cfg.data.lookback, cfg.data.horizon)?;
    let stats = GlobalStats::fit(&train);
    Ok(Prepared {
        train: stats.standardize(&train)?,
        val: stats.standardize(&val)?,
        test: stats.standardize(&test)?,
        stats,
    })
}

pub fn windows<'a>(series: &'a RawSeries, cfg: &RunConfig) -> Result<Windows<'a>> {
    Ok(Windows::new(series, cfg.data.lookback, cfg.data.horizon, 1)?)
}
