//! Generation latency over a grid of horizons and sample counts.

use std::time::Instant;

use serde::Serialize;
use tarfvae_core::model::{ModelConfig, Tarfvae};
use tarfvae_core::nn::ParamStore;
use tarfvae_core::rng::{normal_tensor, stream, Stream};
use tarfvae_core::Real;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub horizons: Vec<usize>,
    pub samples: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub horizon: usize,
    pub samples: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

/// `numerator / denominator` median latency between two grid cells.
#[derive(Clone, Debug, Serialize)]
pub struct LatencyRatio {
    pub numerator: (usize, usize),
    pub denominator: (usize, usize),
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Largest over smallest sample count at the reference horizon (96 when
    /// benchmarked, else the first).
    pub sample_ratio: Option<LatencyRatio>,
    /// Largest over smallest horizon at the smallest sample count.
    pub horizon_ratio: Option<LatencyRatio>,
}

impl BenchTable {
    pub fn median_ms(&self, horizon: usize, samples: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.horizon == horizon && r.samples == samples)
            .map(|r| r.median_ms)
    }

    fn ratio(&self, num: (usize, usize), den: (usize, usize)) -> Option<LatencyRatio> {
        if num == den {
            return None;
        }
        Some(LatencyRatio {
            numerator: num,
            denominator: den,
            ratio: self.median_ms(num.0, num.1)? / self.median_ms(den.0, den.1)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>8} {:>8} {:>12} {:>12}\n", "H", "S", "median_ms", "min_ms");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>8} {:>12.3} {:>12.3}\n",
                r.horizon, r.samples, r.median_ms, r.min_ms
            ));
        }
        for (label, r) in [("samples", &self.sample_ratio), ("horizon", &self.horizon_ratio)] {
            if let Some(r) = r {
                s.push_str(&format!(
                    "{label} ratio (H={}, S={}) / (H={}, S={}) = {:.3}\n",
                    r.numerator.0, r.numerator.1, r.denominator.0, r.denominator.1, r.ratio
                ));
            }
        }
        s
    }
}

/// Times `generate` for every (H, S). `params` are used where the horizon
/// matches `base.horizon`; other horizons get seeded random weights.
pub fn run_bench<T: Real>(base: &ModelConfig, params: Option<&ParamStore<f32>>, spec: &BenchSpec) -> Result<BenchTable> {
    let mut rows = Vec::new();
    let reps = spec.repetitions.max(1);
    for &h in &spec.horizons {
        let mut cfg = base.clone();
        cfg.horizon = h;
        let model: Tarfvae<T> = match params {
            Some(p) if h == base.horizon => Tarfvae::with_params(cfg.clone(), p)?,
            _ => Tarfvae::new(cfg.clone(), &mut stream(spec.seed, Stream::Init))?,
        };
        let x = normal_tensor::<f64, _>(&[cfg.channels, cfg.lookback], &mut stream(spec.seed, Stream::Sample));
        for &s in &spec.samples {
            for _ in 0..spec.warmup {
                model.generate(&x, s, spec.seed)?;
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                std::hint::black_box(model.generate(&x, s, spec.seed)?);
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let median_ms = if reps % 2 == 1 {
                times[reps / 2]
            } else {
                0.5 * (times[reps / 2 - 1] + times[reps / 2])
            };
            rows.push(BenchRow {
                horizon: h,
                samples: s,
                median_ms,
                min_ms: times[0],
            });
        }
    }
    let mut table = BenchTable {
        rows,
        sample_ratio: None,
        horizon_ratio: None,
    };
    let (s_lo, s_hi) = (spec.samples.iter().min(), spec.samples.iter().max());
    let (h_lo, h_hi) = (spec.horizons.iter().min(), spec.horizons.iter().max());
    if let (Some(&s_lo), Some(&s_hi), Some(&h_lo), Some(&h_hi)) = (s_lo, s_hi, h_lo, h_hi) {
        let h_ref = if spec.horizons.contains(&96) { 96 } else { spec.horizons[0] };
        table.sample_ratio = table.ratio((h_ref, s_hi), (h_ref, s_lo));
        table.horizon_ratio = table.ratio((h_hi, s_lo), (h_lo, s_lo));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::new(2, 16, 8);
        c.latent_dim = 4;
        c.heads = 2;
        c
    }

    #[test]
    fn single_repetition_still_gives_a_table() {
        let spec = BenchSpec {
            horizons: vec![8, 16],
            samples: vec![1, 4],
            repetitions: 1,
            warmup: 0,
            seed: 0,
        };
        let t = run_bench::<f32>(&tiny(), None, &spec).unwrap();
        assert_eq!(t.rows.len(), 4);
        let r = t.sample_ratio.as_ref().unwrap();
        assert_eq!((r.numerator, r.denominator), ((8, 4), (8, 1)));
        assert!(t.horizon_ratio.is_some());
        assert!(t.to_text().contains("samples ratio"));
    }
}
