//! Series containers, chronological splits, sliding windows and the two
//! normalizations: per-window instance normalization (model side) and
//! train-split standardization (metric side).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Floor on per-window standard deviations.
pub const NORM_EPS: f64 = 1e-5;

/// A multivariate series, `values: [C, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    pub values: Tensor<f64>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<String>, values: Tensor<f64>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidSeries(format!(
                "values must be [channels, steps], got {:?}",
                values.shape()
            )));
        }
        let t = values.shape()[1];
        if t < 2 {
            return Err(Error::InvalidSeries(format!("need at least 2 steps, got {t}")));
        }
        if timestamps.len() != t {
            return Err(Error::InvalidSeries(format!(
                "{} timestamps for {} steps",
                timestamps.len(),
                t
            )));
        }
        if !values.all_finite() {
            return Err(Error::InvalidSeries("non-finite observation".into()));
        }
        Ok(Self { timestamps, values })
    }

    /// Builds a series from per-channel rows with synthetic integer labels.
    pub fn from_channels(rows: &[Vec<f64>]) -> Result<Self> {
        let values = Tensor::from_rows(rows)?;
        let t = values.shape().get(1).copied().unwrap_or(0);
        Self::new((0..t).map(|i| format!("{i}")).collect(), values)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    /// Steps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let c = self.channels();
        let mut data = Vec::with_capacity(c * (end - start));
        for ch in 0..c {
            data.extend_from_slice(&self.channel(ch)[start..end]);
        }
        RawSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            values: Tensor::new(&[c, end - start], data).expect("slice shape"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    /// 0.6 / 0.2 / 0.2, used for the ETT family.
    pub const ETT: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    /// 0.7 / 0.1 / 0.2, used for everything else.
    pub const DEFAULT: SplitSpec = SplitSpec {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    /// Conventional split for a dataset name.
    pub fn for_dataset(name: &str) -> SplitSpec {
        if name.to_ascii_lowercase().starts_with("ett") {
            Self::ETT
        } else {
            Self::DEFAULT
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidSplit(format!("{name} fraction {f} not in (0,1)")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Step ranges of a split, each `[start, end)` in source time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

pub fn split_bounds(total: usize, spec: &SplitSpec, lookback: usize, horizon: usize) -> Result<SplitBounds> {
    spec.validate()?;
    let n_train = libm::floor(spec.train * total as f64 + 1e-9) as usize;
    let n_val = libm::floor(spec.val * total as f64 + 1e-9) as usize;
    let val_end = n_train + n_val;
    let bounds = SplitBounds {
        train: (0, n_train),
        val: (n_train.saturating_sub(lookback), val_end),
        test: (val_end.saturating_sub(lookback), total),
    };
    let required = lookback + horizon;
    for (segment, (s, e)) in [("train", bounds.train), ("val", bounds.val), ("test", bounds.test)] {
        if e.saturating_sub(s) < required {
            return Err(Error::SegmentTooShort {
                segment,
                len: e.saturating_sub(s),
                required,
            });
        }
    }
    Ok(bounds)
}

/// Train takes the first `floor(train * T)` steps; validation and test each
/// prepend the preceding `lookback` steps so their first target starts
/// exactly where the previous segment ended.
pub fn chronological_split(
    series: &RawSeries,
    spec: &SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let b = split_bounds(series.len(), spec, lookback, horizon)?;
    Ok((
        series.slice(b.train.0, b.train.1),
        series.slice(b.val.0, b.val.1),
        series.slice(b.test.0, b.test.1),
    ))
}

/// One lookback/target pair; `x: [C, L]`, `y: [C, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

impl WindowSample {
    pub fn lookback(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }
}

/// Lazy sliding-window view over a series.
#[derive(Clone, Copy, Debug)]
pub struct Windows<'a> {
    series: &'a RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
}

impl<'a> Windows<'a> {
    pub fn new(series: &'a RawSeries, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "lookback {lookback}, horizon {horizon} and stride {stride} must be positive"
            )));
        }
        if series.len() < lookback + horizon {
            return Err(Error::SeriesTooShort {
                len: series.len(),
                required: lookback + horizon,
            });
        }
        Ok(Self {
            series,
            lookback,
            horizon,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        (self.series.len() - self.lookback - self.horizon) / self.stride + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn series(&self) -> &'a RawSeries {
        self.series
    }

    pub fn start(&self, i: usize) -> usize {
        i * self.stride
    }

    pub fn x_row(&self, i: usize, c: usize) -> &'a [f64] {
        let s = self.start(i);
        &self.series.channel(c)[s..s + self.lookback]
    }

    pub fn y_row(&self, i: usize, c: usize) -> &'a [f64] {
        let s = self.start(i) + self.lookback;
        &self.series.channel(c)[s..s + self.horizon]
    }

    pub fn get(&self, i: usize) -> WindowSample {
        let c = self.channels();
        let mut x = Vec::with_capacity(c * self.lookback);
        let mut y = Vec::with_capacity(c * self.horizon);
        for ch in 0..c {
            x.extend_from_slice(self.x_row(i, ch));
            y.extend_from_slice(self.y_row(i, ch));
        }
        WindowSample {
            x: Tensor::new(&[c, self.lookback], x).expect("window shape"),
            y: Tensor::new(&[c, self.horizon], y).expect("window shape"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// All windows of a series. With `strict = false` a too-short series
/// yields an empty list instead of an error.
pub fn make_windows(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
    strict: bool,
) -> Result<Vec<WindowSample>> {
    match Windows::new(series, lookback, horizon, stride) {
        Ok(w) => Ok(w.iter().collect()),
        Err(Error::SeriesTooShort { .. }) if !strict => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Per-channel lookback statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    /// Population mean and std per row of `x: [C, L]`, std floored at `eps`.
    pub fn from_lookback(x: &Tensor<f64>, eps: f64) -> Self {
        let c = x.shape()[0];
        let mut mu = Vec::with_capacity(c);
        let mut sigma = Vec::with_capacity(c);
        for ch in 0..c {
            let (m, s) = mean_std(x.row(ch));
            mu.push(m);
            sigma.push(s.max(eps));
        }
        Self { mu, sigma }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `(v - mu) / sigma` per channel, for any `[.., C, W]` tensor.
    pub fn apply(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.per_channel(t, |v, m, s| (v - m) / s)
    }

    /// `v * sigma + mu` per channel.
    pub fn invert(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.per_channel(t, |v, m, s| v * s + m)
    }

    fn per_channel(&self, t: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2] != self.channels() {
            return Err(shape_err(
                "normalize",
                format!("tensor {:?} against {} channels", s, self.channels()),
            ));
        }
        let w = s[s.len() - 1];
        let c = self.channels();
        let mut out = t.clone();
        for (r, row) in out.data_mut().chunks_mut(w.max(1)).enumerate() {
            let ch = r % c;
            for v in row {
                *v = f(*v, self.mu[ch], self.sigma[ch]);
            }
        }
        Ok(out)
    }
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(var))
}

/// Normalizes `x` and (optionally) `y` by the statistics of `x` alone.
pub fn instance_normalize(
    x: &Tensor<f64>,
    y: Option<&Tensor<f64>>,
    eps: f64,
) -> Result<(Tensor<f64>, Option<Tensor<f64>>, NormStats)> {
    if x.rank() != 2 {
        return Err(shape_err("instance_normalize", format!("x {:?}", x.shape())));
    }
    x.check_finite("instance_normalize")?;
    let stats = NormStats::from_lookback(x, eps);
    let xn = stats.apply(x)?;
    let yn = y.map(|y| stats.apply(y)).transpose()?;
    Ok((xn, yn, stats))
}

/// Inverse of [`instance_normalize`] on model outputs (`[C, H]` or `[S, C, H]`).
pub fn denormalize(yhat_norm: &Tensor<f64>, stats: &NormStats) -> Result<Tensor<f64>> {
    stats.invert(yhat_norm)
}

/// Per-channel standardization fitted on the training split; all reported
/// metrics live on this scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GlobalStats {
    pub fn fit(train: &RawSeries) -> Self {
        let c = train.channels();
        let mut mu = Vec::with_capacity(c);
        let mut sigma = Vec::with_capacity(c);
        for ch in 0..c {
            let (m, s) = mean_std(train.channel(ch));
            mu.push(m);
            sigma.push(if s > 0.0 { s } else { NORM_EPS });
        }
        Self { mu, sigma }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mu: alloc::vec![0.0; channels],
            sigma: alloc::vec![1.0; channels],
        }
    }

    fn as_norm(&self) -> NormStats {
        NormStats {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
        }
    }

    pub fn standardize(&self, series: &RawSeries) -> Result<RawSeries> {
        Ok(RawSeries {
            timestamps: series.timestamps.clone(),
            values: self.as_norm().apply(&series.values)?,
        })
    }

    pub fn standardize_tensor(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.as_norm().apply(t)
    }

    pub fn destandardize(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.as_norm().invert(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(values: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn split_example_bounds() {
        let b = split_bounds(100, &SplitSpec::DEFAULT, 10, 5).unwrap();
        assert_eq!(b.train, (0, 70));
        assert_eq!(b.val, (60, 80));
        assert_eq!(b.test, (70, 100));
    }

    #[test]
    fn split_rejects_bad_fractions_and_short_segments() {
        let bad = SplitSpec {
            train: 0.6,
            val: 0.1,
            test: 0.2,
        };
        assert!(matches!(split_bounds(100, &bad, 10, 5), Err(Error::InvalidSplit(_))));
        let err = split_bounds(15, &SplitSpec::DEFAULT, 10, 10).unwrap_err();
        assert!(matches!(err, Error::SegmentTooShort { required: 20, .. }));
    }

    #[test]
    fn targets_never_overlap() {
        let s = RawSeries::from_channels(&[(0..200).map(|v| v as f64).collect()]).unwrap();
        let (tr, va, te) = chronological_split(&s, &SplitSpec::ETT, 12, 6).unwrap();
        let last_train_target = tr.channel(0).last().copied().unwrap();
        let first_val_target = Windows::new(&va, 12, 6, 1).unwrap().y_row(0, 0)[0];
        let first_test_target = Windows::new(&te, 12, 6, 1).unwrap().y_row(0, 0)[0];
        assert_eq!(first_val_target, last_train_target + 1.0);
        assert_eq!(first_test_target, va.channel(0).last().copied().unwrap() + 1.0);
    }

    #[test]
    fn window_counts_and_indexing() {
        let s = RawSeries::from_channels(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let w = make_windows(&s, 2, 1, 1, true).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].x.data(), &[1.0, 2.0]);
        assert_eq!(w[0].y.data(), &[3.0]);
        assert_eq!(make_windows(&s, 3, 2, 1, true).unwrap().len(), 1);
        assert!(make_windows(&s, 4, 2, 1, true).is_err());
        assert!(make_windows(&s, 4, 2, 1, false).unwrap().is_empty());
    }

    #[test]
    fn constant_channel_uses_eps() {
        let (xn, _, st) = instance_normalize(&single(&[5.0, 5.0, 5.0]), None, NORM_EPS).unwrap();
        assert_eq!(xn.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(st.sigma, vec![NORM_EPS]);
    }

    #[test]
    fn population_std() {
        let (xn, _, st) = instance_normalize(&single(&[1.0, 2.0, 3.0]), None, NORM_EPS).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert_eq!(st.mu, vec![2.0]);
        assert!((st.sigma[0] - s).abs() < 1e-15);
        for (a, b) in xn.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn y_uses_x_statistics() {
        let (_, yn, _) =
            instance_normalize(&single(&[0.0, 0.0]), Some(&single(&[1.0])), 1e-5).unwrap();
        assert!((yn.unwrap().data()[0] - 1e5).abs() < 1e-6);
    }

    #[test]
    fn denormalize_cases() {
        let st = NormStats {
            mu: vec![2.0],
            sigma: vec![3.0],
        };
        assert_eq!(denormalize(&single(&[1.0, -1.0]), &st).unwrap().data(), &[5.0, -1.0]);
        assert_eq!(denormalize(&single(&[0.0, 0.0]), &st).unwrap().data(), &[2.0, 2.0]);
        let bad = NormStats {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 1.0],
        };
        assert!(denormalize(&single(&[0.0]), &bad).is_err());
    }

    #[test]
    fn global_stats_round_trip() {
        let s = RawSeries::from_channels(&[vec![1.0, 3.0, 5.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let g = GlobalStats::fit(&s);
        let z = g.standardize(&s).unwrap();
        assert!(g.sigma.iter().all(|&v| v > 0.0));
        let back = g.destandardize(&z.values).unwrap();
        assert!(back.max_abs_diff(&s.values) < 1e-12);
    }
}
