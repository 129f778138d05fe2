//! Invariant suites run by the `selftest` command.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tarfvae_core::data::{denormalize, instance_normalize, NORM_EPS};
use tarfvae_core::gradcheck::grad_check;
use tarfvae_core::loss::{compute_loss, loss_and_grad, Ablation, LN_2PI};
use tarfvae_core::metrics::{
    crps_gaussian_closed_form, crps_sample_oracle, default_levels, high_tail_above, high_tail_below,
    low_tail_above, low_tail_below, QuantileCrps,
};
use tarfvae_core::model::{ModelConfig, Tarfvae};
use tarfvae_core::rng::{normal_tensor, stream, Stream, StreamRng};
use tarfvae_core::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Negative control: biases every reported log-det so the log-det suite
    /// must fail.
    pub corrupt_logdet: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type SuiteFn = fn(&SelftestOptions) -> Result<String, String>;

pub const SUITES: [(&str, SuiteFn); 6] = [
    ("log-det", suite_logdet),
    ("invertibility", suite_invertibility),
    ("grad-check", suite_gradcheck),
    ("loss-oracle", suite_loss_oracle),
    ("crps-oracles", suite_crps),
    ("normalization", suite_normalization),
];

pub fn run_all(opts: &SelftestOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, f)| {
            let t0 = Instant::now();
            let r = f(opts);
            let seconds = t0.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult {
                name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

fn flow_config(k: usize) -> ModelConfig {
    let mut c = ModelConfig::new(3, 4, 2);
    c.latent_dim = 4;
    c.heads = 2;
    c.flow_blocks = k;
    c.mlp_blocks = 1;
    c
}

/// Fills every parameter whose name starts with `prefix` with
/// `U(-scale, scale)`.
pub fn randomize_prefix(m: &mut Tarfvae<f64>, prefix: &str, scale: f64, rng: &mut StreamRng) {
    let ids: Vec<_> = m
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for v in m.params.values_mut(id) {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn numeric_log_abs_det(m: &Tarfvae<f64>, z0: &Tensor<f64>, cond: &Tensor<f64>, h: f64) -> Result<f64, String> {
    let n = z0.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        let mut p = z0.clone();
        p.data_mut()[col] += h;
        let fp = m.tarflow_forward(&p, cond).map_err(|e| e.to_string())?.z;
        p.data_mut()[col] -= 2.0 * h;
        let fm = m.tarflow_forward(&p, cond).map_err(|e| e.to_string())?.z;
        for row in 0..n {
            jac[(row, col)] = (fp.data()[row] - fm.data()[row]) / (2.0 * h);
        }
    }
    Ok(jac.lu().determinant().abs().ln())
}

fn suite_logdet(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = stream(opts.seed, Stream::Noise);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for k in [1, 2, 4] {
        for draw in 0..7u64 {
            let mut m = Tarfvae::<f64>::new(flow_config(k), &mut stream(opts.seed + draw, Stream::Init))
                .map_err(|e| e.to_string())?;
            randomize_prefix(&mut m, "flow.", 0.4, &mut rng);
            if opts.corrupt_logdet {
                m.inject_logdet_bias(1e-3);
            }
            let z0 = normal_tensor(&[3, 4], &mut rng);
            let cond = normal_tensor(&[3, 4], &mut rng);
            let s_sum = m.tarflow_forward(&z0, &cond).map_err(|e| e.to_string())?.s_sum;
            let numeric = numeric_log_abs_det(&m, &z0, &cond, 1e-5)?;
            worst = worst.max((s_sum - numeric).abs());
            draws += 1;
        }
    }
    ensure(worst <= 1e-5, || format!("max |s_sum - ln|det J|| = {worst:.3e} > 1e-5"))?;
    Ok(format!("{draws} draws, max error {worst:.2e}"))
}

fn suite_invertibility(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = stream(opts.seed ^ 1, Stream::Noise);
    let mut worst = 0.0f64;
    for k in [1, 2, 4] {
        for draw in 0..7u64 {
            let mut m = Tarfvae::<f64>::new(flow_config(k), &mut stream(opts.seed + draw, Stream::Init))
                .map_err(|e| e.to_string())?;
            randomize_prefix(&mut m, "flow.", 0.4, &mut rng);
            let z0 = normal_tensor(&[3, 4], &mut rng);
            let cond = normal_tensor(&[3, 4], &mut rng);
            let z = m.tarflow_forward(&z0, &cond).map_err(|e| e.to_string())?.z;
            let back = m.tarflow_inverse(&z, &cond).map_err(|e| e.to_string())?;
            worst = worst.max(back.max_abs_diff(&z0));
        }
    }
    ensure(worst <= 1e-8, || format!("max round-trip error {worst:.3e} > 1e-8"))?;
    Ok(format!("max round-trip error {worst:.2e}"))
}

fn suite_gradcheck(opts: &SelftestOptions) -> Result<String, String> {
    let mut cfg = ModelConfig::new(2, 8, 4);
    cfg.latent_dim = 4;
    cfg.heads = 2;
    cfg.flow_blocks = 2;
    let mut m = Tarfvae::<f64>::new(cfg, &mut stream(opts.seed, Stream::Init)).map_err(|e| e.to_string())?;
    let mut rng = stream(opts.seed, Stream::Noise);
    randomize_prefix(&mut m, "flow.", 0.3, &mut rng);
    let x = normal_tensor(&[2, 2, 8], &mut rng);
    let y = normal_tensor(&[2, 2, 4], &mut rng);
    let eps = normal_tensor(&[2, 2, 4], &mut rng);
    let err = grad_check(
        &m.params,
        |p| {
            let mut mm = m.clone();
            mm.params = p.clone();
            let (bd, g) = loss_and_grad(&mm, &x, &y, &eps, Ablation::Full).expect("finite loss");
            (bd.total, g)
        },
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    ensure(err <= 1e-4, || format!("max relative error {err:.3e} > 1e-4"))?;
    Ok(format!("{} parameters, max relative error {err:.2e}", m.params.num_scalars()))
}

/// Negative ELBO from the three Gaussian log-densities and the flow's
/// log-det, for one unbatched sample.
pub fn oracle_neg_elbo(m: &Tarfvae<f64>, x: &Tensor<f64>, y: &Tensor<f64>, eps: &Tensor<f64>) -> Result<f64, String> {
    let prior = e(m.prior_forward(x))?;
    let q = e(m.encoder_forward(x, y))?;
    let z0: Vec<f64> = q
        .mu
        .data()
        .iter()
        .zip(q.logvar.data())
        .zip(eps.data())
        .map(|((mu, lv), e)| mu + (0.5 * lv).exp() * e)
        .collect();
    let z0 = e(Tensor::new(q.mu.shape(), z0))?;
    let cond = e(m.flow_condition(x, y))?;
    let flow = e(m.tarflow_forward(&z0, &cond))?;
    let yhat = e(m.decoder_forward(&flow.z, x))?;

    let log_normal = |v: f64, mu: f64, lv: f64| -0.5 * (LN_2PI + lv + (v - mu) * (v - mu) / lv.exp());
    let log_py: f64 = y.data().iter().zip(yhat.data()).map(|(&v, &mu)| log_normal(v, mu, 0.0)).sum();
    let log_q0: f64 = z0
        .data()
        .iter()
        .zip(q.mu.data())
        .zip(q.logvar.data())
        .map(|((&v, &mu), &lv)| log_normal(v, mu, lv))
        .sum();
    let log_pz: f64 = flow
        .z
        .data()
        .iter()
        .zip(prior.mu.data())
        .zip(prior.logvar.data())
        .map(|((&v, &mu), &lv)| log_normal(v, mu, lv))
        .sum();
    // log q(z|x,y) = log q0(z0) - log|det dz/dz0|
    let log_qz = log_q0 - flow.s_sum;
    Ok(-(log_py + log_pz - log_qz))
}

fn e<T>(r: tarfvae_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn suite_loss_oracle(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = stream(opts.seed ^ 2, Stream::Noise);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let c = rng.random_range(1..=3);
        let l = rng.random_range(2..=6);
        let h = rng.random_range(1..=4);
        let d = 2 * rng.random_range(1..=2);
        let mut cfg = ModelConfig::new(c, l, h);
        cfg.latent_dim = d;
        cfg.heads = 2;
        cfg.flow_blocks = rng.random_range(1..=3);
        cfg.mlp_blocks = 1;
        let mut m = Tarfvae::<f64>::new(cfg, &mut stream(opts.seed + i, Stream::Init)).map_err(|e| e.to_string())?;
        randomize_prefix(&mut m, "flow.", 0.3, &mut rng);
        let x = normal_tensor(&[c, l], &mut rng);
        let y = normal_tensor(&[c, h], &mut rng);
        let eps = normal_tensor(&[c, d], &mut rng);
        let (_, bd) = compute_loss(&m, &x, &y, &eps, Ablation::Full).map_err(|e| e.to_string())?;
        let oracle = oracle_neg_elbo(&m, &x, &y, &eps)?;
        worst = worst.max((bd.total - oracle).abs());
    }
    ensure(worst <= 1e-8, || format!("max |total - oracle| = {worst:.3e} > 1e-8"))?;
    Ok(format!("100 instances, max error {worst:.2e}"))
}

/// `n` stratified standard-normal samples `Phi^-1((i + 1/2) / n)`.
pub fn stratified_normal(n: usize) -> Vec<f64> {
    let unit = Normal::standard();
    (0..n).map(|i| unit.inverse_cdf((i as f64 + 0.5) / n as f64)).collect()
}

fn suite_crps(opts: &SelftestOptions) -> Result<String, String> {
    const N: usize = 10_000;
    let q = QuantileCrps::new(&default_levels()).map_err(|e| e.to_string())?;
    let random: Tensor<f64> = normal_tensor(&[N], &mut stream(opts.seed, Stream::Synthetic));
    let stratified = stratified_normal(N);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut sample_gap, mut exact_gap) = (0.0f64, 0.0f64);
    for y in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let exact = crps_gaussian_closed_form(0.0, 1.0, y).map_err(|e| e.to_string())?;
        for (draws, vs_exact) in [(random.data(), false), (&stratified[..], true)] {
            let quant = q.score_samples(&mut draws.to_vec(), y);
            let energy = crps_sample_oracle(draws, y).map_err(|e| e.to_string())?;
            sample_gap = sample_gap.max(rel(quant, energy));
            if vs_exact {
                exact_gap = exact_gap.max(rel(quant, exact)).max(rel(energy, exact));
            }
        }
    }
    ensure(sample_gap <= 0.01, || format!("quantile vs energy form differ by {sample_gap:.3e} > 1%"))?;
    ensure(exact_gap <= 0.01, || format!("sample forms vs closed form differ by {exact_gap:.3e} > 1%"))?;
    let mut sorted = random.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[99], sorted[9899]);
    let gap = (low_tail_below(lo, 0.01, lo) - low_tail_above(lo, 0.01, lo))
        .abs()
        .max((high_tail_below(hi, 0.99, hi) - high_tail_above(hi, 0.99, hi)).abs());
    ensure(gap <= 1e-12, || format!("tail discontinuity {gap:.3e}"))?;
    Ok(format!(
        "quantile vs energy {:.3}%, vs closed form {:.3}%",
        sample_gap * 100.0,
        exact_gap * 100.0
    ))
}

fn suite_normalization(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = stream(opts.seed ^ 3, Stream::Noise);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let shift = rng.random_range(-1e3..1e3);
        let x = normal_tensor::<f64, _>(&[3, 16], &mut rng).map(|v| v * scale + shift);
        let y = normal_tensor::<f64, _>(&[3, 4], &mut rng).map(|v| v * scale + shift);
        let (_, yn, stats) = instance_normalize(&x, Some(&y), NORM_EPS).map_err(|e| e.to_string())?;
        let back = denormalize(&yn.expect("y given"), &stats).map_err(|e| e.to_string())?;
        for (a, b) in back.data().iter().zip(y.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure(worst <= 1e-6, || format!("round-trip relative error {worst:.3e} > 1e-6"))?;

    let mut cfg = ModelConfig::new(2, 8, 4);
    cfg.latent_dim = 4;
    cfg.heads = 2;
    let m = Tarfvae::<f64>::new(cfg, &mut stream(opts.seed, Stream::Init)).map_err(|e| e.to_string())?;
    let flat = Tensor::full(&[2, 8], 7.5);
    let out = m.generate(&flat, 4, opts.seed).map_err(|e| e.to_string())?;
    ensure(out.samples.all_finite(), || "constant window gave non-finite samples".into())?;
    Ok(format!("max relative error {worst:.2e}; constant window finite"))
}
