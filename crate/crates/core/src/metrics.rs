//! Point and probabilistic scores for sampled forecasts.
//!
//! Point metrics use the per-cell sample median. CRPS is computed from
//! sorted-sample quantiles with constant extrapolation beyond the outermost
//! levels; two independent routes (energy form over samples, Gaussian closed
//! form) are provided to cross-check it.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::{norm_cdf, norm_pdf};
use crate::tensor::Tensor;

/// `S` sampled trajectories, `[S, C, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSamples {
    pub samples: Tensor<f64>,
}

impl ForecastSamples {
    pub fn new(samples: Tensor<f64>) -> Result<Self> {
        if samples.rank() != 3 || samples.shape()[0] == 0 {
            return Err(shape_err("forecast samples", format!("{:?}", samples.shape())));
        }
        samples.check_finite("forecast samples")?;
        Ok(Self { samples })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.samples.shape()[2]
    }

    /// All `S` values of cell `(c, h)`.
    pub fn cell(&self, c: usize, h: usize) -> Vec<f64> {
        let (ch, hz) = (self.channels(), self.horizon());
        (0..self.sample_count())
            .map(|s| self.samples.data()[(s * ch + c) * hz + h])
            .collect()
    }

    /// Per-cell median, `[C, H]`.
    pub fn median(&self) -> Tensor<f64> {
        let (c, h) = (self.channels(), self.horizon());
        let mut out = Vec::with_capacity(c * h);
        for ch in 0..c {
            for t in 0..h {
                let mut v = self.cell(ch, t);
                out.push(median_in_place(&mut v));
            }
        }
        Tensor::new(&[c, h], out).expect("median shape")
    }

    /// Applies `f` to every sample trajectory `[C, H]`.
    pub fn map_trajectories(
        &self,
        f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    ) -> Result<ForecastSamples> {
        let (c, h) = (self.channels(), self.horizon());
        let mut out = Vec::with_capacity(self.samples.len());
        for s in 0..self.sample_count() {
            let traj = Tensor::new(&[c, h], self.samples.data()[s * c * h..(s + 1) * c * h].to_vec())?;
            out.extend_from_slice(f(&traj)?.data());
        }
        ForecastSamples::new(Tensor::new(self.samples.shape(), out)?)
    }
}

fn sort(v: &mut [f64]) {
    v.sort_by(|a, b| a.total_cmp(b));
}

/// Median; even counts take the midpoint of the two central values.
pub fn median_in_place(v: &mut [f64]) -> f64 {
    sort(v);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linearly interpolated quantile of sorted data at position `q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE/MAE of the per-cell sample median against `truth` (`[C, H]` each).
pub fn point_metrics(samples: &[ForecastSamples], truth: &[Tensor<f64>]) -> Result<PointMetrics> {
    if samples.len() != truth.len() || samples.is_empty() {
        return Err(shape_err(
            "point_metrics",
            format!("{} forecasts for {} targets", samples.len(), truth.len()),
        ));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (s, y) in samples.iter().zip(truth) {
        let m = s.median();
        if m.shape() != y.shape() {
            return Err(shape_err("point_metrics", format!("{:?} vs {:?}", m.shape(), y.shape())));
        }
        for (a, b) in m.data().iter().zip(y.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += y.len();
    }
    Ok(PointMetrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// Quantile values of one cell at fixed levels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSet {
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::InvalidQuantiles(format!("need at least 2 levels, got {}", levels.len())));
    }
    if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::InvalidQuantiles("levels must lie in (0, 1)".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidQuantiles("levels must be strictly ascending".into()));
    }
    Ok(())
}

/// `0.01, 0.02, ..., 0.99`.
pub fn default_levels() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Empirical quantiles of `samples` (at least two) at `levels`.
pub fn extract_quantiles(samples: &[f64], levels: &[f64]) -> Result<QuantileSet> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            got: samples.len(),
        });
    }
    validate_levels(levels)?;
    let mut sorted = samples.to_vec();
    sort(&mut sorted);
    Ok(QuantileSet {
        levels: levels.to_vec(),
        values: levels.iter().map(|&q| quantile_sorted(&sorted, q)).collect(),
    })
}

/// Quantile-grid CRPS with precomputed middle-sum weights.
///
/// Weights are trapezoidal over the level grid: `(q_{i+1} - q_{i-1}) / 2`
/// inside, `(q_2 - q_1) / 2` and `(q_n - q_{n-1}) / 2` at the ends, so the
/// middle sum covers exactly `[q_1, q_n]`. On a uniform grid the interior
/// weight equals the grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileCrps {
    levels: Vec<f64>,
    weights: Vec<f64>,
}

impl QuantileCrps {
    pub fn new(levels: &[f64]) -> Result<Self> {
        validate_levels(levels)?;
        let n = levels.len();
        let weights = (0..n)
            .map(|i| {
                let lo = if i == 0 { levels[0] } else { levels[i - 1] };
                let hi = if i == n - 1 { levels[n - 1] } else { levels[i + 1] };
                0.5 * (hi - lo)
            })
            .collect();
        Ok(Self {
            levels: levels.to_vec(),
            weights,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Score of quantile values `values` (one per level) against `y`.
    pub fn score(&self, values: &[f64], y: f64) -> f64 {
        let n = self.levels.len();
        let (q1, qn) = (self.levels[0], self.levels[n - 1]);
        let low = low_tail(values[0], q1, y);
        let high = high_tail(values[n - 1], qn, y);
        let mut mid = 0.0;
        for ((&q, &v), &w) in self.levels.iter().zip(values).zip(&self.weights) {
            let ind = if y <= v { 1.0 } else { 0.0 };
            mid += (v - y) * (ind - q) * w;
        }
        low + 2.0 * mid + high
    }

    /// Score of raw samples (sorted internally).
    pub fn score_samples(&self, samples: &mut [f64], y: f64) -> f64 {
        sort(samples);
        let values: Vec<f64> = self.levels.iter().map(|&q| quantile_sorted(samples, q)).collect();
        self.score(&values, y)
    }
}

/// `int_0^{q1} 2 (Q1 - y)(1{y <= Q1} - q) dq`.
pub fn low_tail(q1_value: f64, q1: f64, y: f64) -> f64 {
    if y <= q1_value {
        low_tail_below(q1_value, q1, y)
    } else {
        low_tail_above(q1_value, q1, y)
    }
}

pub fn low_tail_below(q1_value: f64, q1: f64, y: f64) -> f64 {
    2.0 * (q1_value - y) * (q1 - 0.5 * q1 * q1)
}

pub fn low_tail_above(q1_value: f64, q1: f64, y: f64) -> f64 {
    2.0 * (q1_value - y) * (-0.5 * q1 * q1)
}

/// `int_{qn}^1 2 (Qn - y)(1{y <= Qn} - q) dq`.
pub fn high_tail(qn_value: f64, qn: f64, y: f64) -> f64 {
    if y <= qn_value {
        high_tail_below(qn_value, qn, y)
    } else {
        high_tail_above(qn_value, qn, y)
    }
}

pub fn high_tail_below(qn_value: f64, qn: f64, y: f64) -> f64 {
    2.0 * (qn_value - y) * (0.5 * (1.0 - qn) * (1.0 - qn))
}

pub fn high_tail_above(qn_value: f64, qn: f64, y: f64) -> f64 {
    2.0 * (qn_value - y) * (-0.5 * (1.0 - qn * qn))
}

pub fn crps_quantile(qs: &QuantileSet, y: f64) -> Result<f64> {
    if qs.values.len() != qs.levels.len() {
        return Err(shape_err(
            "crps_quantile",
            format!("{} values for {} levels", qs.values.len(), qs.levels.len()),
        ));
    }
    Ok(QuantileCrps::new(&qs.levels)?.score(&qs.values, y))
}

/// Exact empirical CRPS `E|X - y| - E|X - X'| / 2` over the sample set.
///
/// The pair term uses the sorted-order identity
/// `sum_{i,j} |x_i - x_j| = 2 sum_i (2i - n - 1) x_(i)` (1-based).
pub fn crps_sample_oracle(samples: &[f64], y: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let abs_err = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sort(&mut sorted);
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(abs_err - 0.5 * pair_sum / (n * n))
}

/// CRPS of `N(mu, sigma^2)` at `y`:
/// `sigma [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]`.
pub fn crps_gaussian_closed_form(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let z = (y - mu) / sigma;
    let inv_sqrt_pi = 0.564_189_583_547_756_3;
    Ok(sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - inv_sqrt_pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fs(cells: &[&[f64]]) -> ForecastSamples {
        // one channel, one step per cell list -> [S, 1, 1]
        let s = cells[0].len();
        ForecastSamples::new(Tensor::new(&[s, 1, 1], cells[0].to_vec()).unwrap()).unwrap()
    }

    fn truth(v: f64) -> Tensor<f64> {
        Tensor::new(&[1, 1], vec![v]).unwrap()
    }

    #[test]
    fn point_metric_cases() {
        let m = point_metrics(&[fs(&[&[1.0, 1.0]])], &[truth(1.0)]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = point_metrics(&[fs(&[&[0.0, 2.0]])], &[truth(1.0)]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = point_metrics(&[fs(&[&[5.0, 0.0, 1.0]])], &[truth(2.0)]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        assert!(point_metrics(&[fs(&[&[1.0]])], &[Tensor::zeros(&[2, 1])]).is_err());
    }

    #[test]
    fn quantile_cases() {
        assert_eq!(extract_quantiles(&[0.0, 1.0], &[0.25, 0.5]).unwrap().values[1], 0.5);
        let s = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(extract_quantiles(&s, &[0.25, 0.5]).unwrap().values[0], 1.75);
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&sorted, 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 4.0);
        assert!(extract_quantiles(&[1.0], &[0.1, 0.9]).is_err());
        assert!(extract_quantiles(&s, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn perfect_quantiles_score_zero() {
        let qs = QuantileSet {
            levels: default_levels(),
            values: vec![1.5; 99],
        };
        assert_eq!(crps_quantile(&qs, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn low_tail_hand_value() {
        assert!((low_tail(2.0, 0.1, 3.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn narrow_pair_approaches_absolute_error() {
        for (m, y) in [(1.0, 3.0), (2.0, -1.0), (0.5, 0.5)] {
            let delta = 1e-7;
            let qs = QuantileSet {
                levels: vec![0.5 - delta, 0.5 + delta],
                values: vec![m, m],
            };
            let c = crps_quantile(&qs, y).unwrap();
            assert!((c - f64::abs(m - y)).abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn tail_branches_meet_at_boundary() {
        for (v, q) in [(0.3, 0.01), (-2.0, 0.2), (5.0, 0.49)] {
            assert!((low_tail_below(v, q, v) - low_tail_above(v, q, v)).abs() <= 1e-12);
            assert!((high_tail_below(v, 1.0 - q, v) - high_tail_above(v, 1.0 - q, v)).abs() <= 1e-12);
        }
    }

    fn brute_energy(samples: &[f64], y: f64) -> f64 {
        let n = samples.len() as f64;
        let a = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
        let mut b = 0.0;
        for x in samples {
            for xp in samples {
                b += (x - xp).abs();
            }
        }
        a - 0.5 * b / (n * n)
    }

    #[test]
    fn energy_oracle_cases() {
        assert_eq!(crps_sample_oracle(&[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(crps_sample_oracle(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        let s = [0.3, -1.0, 2.5, 0.0, 7.0];
        let a = crps_sample_oracle(&s, 0.7).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + 3.0).collect();
        let b = crps_sample_oracle(&shifted, 3.7).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - brute_energy(&s, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_closed_form_cases() {
        let pi = core::f64::consts::PI;
        let at_mean = crps_gaussian_closed_form(0.0, 2.0, 0.0).unwrap();
        assert!((at_mean - 2.0 * ((2.0 / pi).sqrt() - 1.0 / pi.sqrt())).abs() < 1e-12);
        let a = crps_gaussian_closed_form(1.0, 0.5, 1.7).unwrap();
        let b = crps_gaussian_closed_form(1.0, 1.5, 1.0 + 3.0 * 0.7).unwrap();
        assert!((3.0 * a - b).abs() < 1e-12);
        // Far tail: CRPS -> |y - mu| - sigma / sqrt(pi), so the relative gap
        // to the absolute error falls below 1% only once z exceeds ~56.
        let far = crps_gaussian_closed_form(0.0, 1.0, 6.0).unwrap();
        assert!((far - (6.0 - 1.0 / pi.sqrt())).abs() < 1e-6);
        let farther = crps_gaussian_closed_form(0.0, 1.0, 60.0).unwrap();
        assert!(((farther - 60.0) / 60.0).abs() < 0.01);
        assert!(crps_gaussian_closed_form(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn even_median_is_midpoint() {
        assert_eq!(median_in_place(&mut [3.0, 1.0]), 2.0);
        assert_eq!(median_in_place(&mut [2.0, 0.0, 1.0]), 1.0);
    }
}
