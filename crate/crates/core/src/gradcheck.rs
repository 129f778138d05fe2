//! Central-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::nn::ParamStore;
use crate::real::Real;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Per-coordinate comparison result.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(p+h) - f(p-h)) / 2h` on every coordinate and returns the
/// max relative error.
pub fn grad_check<T: Real>(
    params: &ParamStore<T>,
    loss_fn: impl Fn(&ParamStore<T>) -> (T, Gradients<T>),
    h: f64,
) -> Result<f64> {
    grad_check_report(params, loss_fn, h, None).map(|r| r.max_relative_error)
}

/// Like [`grad_check`], optionally restricted to a subset of flat
/// coordinates.
pub fn grad_check_report<T: Real>(
    params: &ParamStore<T>,
    loss_fn: impl Fn(&ParamStore<T>) -> (T, Gradients<T>),
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let (f0, grads) = loss_fn(params);
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let flat_grad = grads.flatten(params);
    let base = params.flatten();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };

    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let orig = base[i];
        flat[i] = orig + T::from_f64(h);
        probe.set_flat(&flat)?;
        let fp = loss_fn(&probe).0.as_f64();
        flat[i] = orig - T::from_f64(h);
        probe.set_flat(&flat)?;
        let fm = loss_fn(&probe).0.as_f64();
        flat[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = flat_grad[i].as_f64();
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
