//! Synthetic series with known conditional distributions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::RawSeries;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `x_t = phi_c x_{t-1} + sigma e_t`. `phi` holds one coefficient per
    /// channel, or a single one shared by all.
    Ar1 { phi: Vec<f64>, sigma: f64 },
    /// `x_t = A sin(2 pi t / period + 2 pi c / C) + sigma e_t`.
    SineNoise { period: f64, amplitude: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn ar1(phi: f64, sigma: f64, length: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Ar1 {
                phi: vec![phi],
                sigma,
            },
            length,
            channels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length < 2 {
            return Err(Error::InvalidSynthetic(format!(
                "need channels >= 1 and length >= 2, got {} and {}",
                self.channels, self.length
            )));
        }
        match &self.kind {
            SyntheticKind::Ar1 { phi, sigma } => {
                if phi.len() != 1 && phi.len() != self.channels {
                    return Err(Error::InvalidSynthetic(format!(
                        "{} phi values for {} channels",
                        phi.len(),
                        self.channels
                    )));
                }
                if phi.iter().any(|p| !(p.abs() < 1.0)) {
                    return Err(Error::InvalidSynthetic("|phi| must be below 1".into()));
                }
                check_sigma(*sigma)
            }
            SyntheticKind::SineNoise {
                period,
                amplitude,
                sigma,
            } => {
                if !(*period >= 2.0) || !amplitude.is_finite() {
                    return Err(Error::InvalidSynthetic("period must be >= 2".into()));
                }
                check_sigma(*sigma)
            }
        }
    }

    /// Coefficient of channel `c` for an AR(1) spec.
    pub fn phi(&self, c: usize) -> Option<f64> {
        match &self.kind {
            SyntheticKind::Ar1 { phi, .. } => Some(if phi.len() == 1 { phi[0] } else { phi[c] }),
            SyntheticKind::SineNoise { .. } => None,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    // Zero noise is allowed for deterministic fixtures.
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSynthetic(format!("sigma must be non-negative, got {sigma}")));
    }
    Ok(())
}

/// Generates the series; AR(1) starts from its stationary distribution.
pub fn gen_series(spec: &SyntheticSpec) -> Result<RawSeries> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let (c, t) = (spec.channels, spec.length);
    let mut data = Vec::with_capacity(c * t);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    match &spec.kind {
        SyntheticKind::Ar1 { sigma, .. } => {
            for ch in 0..c {
                let phi = spec.phi(ch).expect("ar1");
                let mut x = sigma / libm::sqrt(1.0 - phi * phi) * normal();
                data.push(x);
                for _ in 1..t {
                    x = phi * x + sigma * normal();
                    data.push(x);
                }
            }
        }
        SyntheticKind::SineNoise {
            period,
            amplitude,
            sigma,
        } => {
            let two_pi = 2.0 * core::f64::consts::PI;
            for ch in 0..c {
                let phase = two_pi * ch as f64 / c as f64;
                for i in 0..t {
                    data.push(amplitude * libm::sin(two_pi * i as f64 / period + phase) + sigma * normal());
                }
            }
        }
    }
    RawSeries::new(
        (0..t).map(|i| format!("{i}")).collect(),
        Tensor::new(&[c, t], data)?,
    )
}

/// Per-channel `(mu, sigma)` of `x_{L+h}` given a raw lookback window
/// `x: [C, L]` (`h >= 1`).
pub fn analytic_forecast_distribution(spec: &SyntheticSpec, x: &Tensor<f64>, h: usize) -> Result<Vec<(f64, f64)>> {
    let sigma = match &spec.kind {
        SyntheticKind::Ar1 { sigma, .. } => *sigma,
        SyntheticKind::SineNoise { .. } => return Err(Error::UnsupportedKind),
    };
    if x.rank() != 2 || x.shape()[0] != spec.channels || x.shape()[1] == 0 || h == 0 {
        return Err(Error::Shape {
            op: "analytic_forecast_distribution",
            detail: format!("window {:?}, step {h}", x.shape()),
        });
    }
    let l = x.shape()[1];
    Ok((0..spec.channels)
        .map(|c| {
            let phi = spec.phi(c).expect("ar1");
            let last = x.row(c)[l - 1];
            let ph = libm::pow(phi, h as f64);
            let var = sigma * sigma * (1.0 - ph * ph) / (1.0 - phi * phi);
            (ph * last, libm::sqrt(var))
        })
        .collect())
}
