//! Single-sample negative ELBO, split into its six terms.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::model::{GaussianVars, Tarfvae};
use crate::real::Real;
use crate::tensor::Tensor;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Skip the flow: `z = z0`, zero log-det.
    NoFlow,
}

/// Batch-mean value of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub const_term: f64,
    pub logvar_term: f64,
    pub logdet_term: f64,
    pub recon_term: f64,
    pub q_quad_term: f64,
    pub prior_quad_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term_sum(&self) -> f64 {
        self.const_term
            + self.logvar_term
            + self.logdet_term
            + self.recon_term
            + self.q_quad_term
            + self.prior_quad_term
    }

    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("const_term", self.const_term),
            ("logvar_term", self.logvar_term),
            ("logdet_term", self.logdet_term),
            ("recon_term", self.recon_term),
            ("q_quad_term", self.q_quad_term),
            ("prior_quad_term", self.prior_quad_term),
        ]
    }

    /// Element-wise accumulation, used for epoch means.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.const_term += w * other.const_term;
        self.logvar_term += w * other.logvar_term;
        self.logdet_term += w * other.logdet_term;
        self.recon_term += w * other.recon_term;
        self.q_quad_term += w * other.q_quad_term;
        self.prior_quad_term += w * other.prior_quad_term;
        self.total += w * other.total;
    }
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub yhat: Var,
    pub z: Var,
    pub prior: GaussianVars,
    pub posterior: GaussianVars,
}

fn term(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term: name },
        other => other,
    }
}

/// Records the loss on `g`. `x: [B, C, L]`, `y: [B, C, H]` (normalized with
/// the stats of `x`), `eps: [B, C, D]`.
pub fn loss_on<T: Real>(
    model: &Tarfvae<T>,
    g: &mut Graph<'_, T>,
    x: Var,
    y: Var,
    eps: Var,
    ablation: Ablation,
) -> Result<(LossVars, LossBreakdown)> {
    let cfg = &model.config;
    let bsz = g.shape(x)[0];
    let expect = [
        (x, cfg.lookback, "x"),
        (y, cfg.horizon, "y"),
        (eps, cfg.latent_dim, "eps"),
    ];
    for (v, len, name) in expect {
        let s = g.shape(v);
        if s.len() != 3 || s[0] != bsz || s[1] != cfg.channels || s[2] != len {
            return Err(shape_err(
                "compute_loss",
                format!("{name} {:?}, expected [{bsz}, {}, {len}]", s, cfg.channels),
            ));
        }
    }
    let inv_b = 1.0 / bsz as f64;

    let prior = model.prior_on(g, x).map_err(term("prior"))?;
    let xy = g.concat_last(x, y)?;
    let posterior = model.encoder_on(g, xy).map_err(term("encoder"))?;
    let z0 = model.reparameterize_on(g, posterior, eps).map_err(term("reparameterize"))?;

    let (z, logdet) = match ablation {
        Ablation::Full => {
            let f = model.flow_on(g, z0, xy).map_err(term("logdet_term"))?;
            let ld = g.scale(f.s_sum, T::from_f64(-inv_b)).map_err(term("logdet_term"))?;
            (f.z, Some(ld))
        }
        Ablation::NoFlow => (z0, None),
    };
    let yhat = model.decoder_on(g, z, x, 1).map_err(term("recon_term"))?;

    let logvar = {
        let f = term("logvar_term");
        let d = g.sub(prior.logvar, posterior.logvar).map_err(&f)?;
        let s = g.sum(d).map_err(&f)?;
        g.scale(s, T::from_f64(0.5 * inv_b)).map_err(&f)?
    };
    let recon = {
        let f = term("recon_term");
        let d = g.sub(y, yhat).map_err(&f)?;
        let d2 = g.square(d).map_err(&f)?;
        let s = g.sum(d2).map_err(&f)?;
        g.scale(s, T::from_f64(0.5 * inv_b)).map_err(&f)?
    };
    let prior_quad = {
        let f = term("prior_quad_term");
        let d = g.sub(z, prior.mu).map_err(&f)?;
        let d2 = g.square(d).map_err(&f)?;
        let neg = g.scale(prior.logvar, T::from_f64(-1.0)).map_err(&f)?;
        let prec = g.exp(neg).map_err(&f)?;
        let w = g.mul(d2, prec).map_err(&f)?;
        let s = g.sum(w).map_err(&f)?;
        g.scale(s, T::from_f64(0.5 * inv_b)).map_err(&f)?
    };

    let const_term = 0.5 * (cfg.channels * cfg.horizon) as f64 * LN_2PI;
    let q_quad_term = -0.5 * inv_b * g.value(eps).data().iter().map(|e| { let v = e.as_f64(); v * v }).sum::<f64>();
    let constant = g.input(Tensor::scalar(T::from_f64(const_term + q_quad_term)))?;

    let mut total = g.add(logvar, recon)?;
    total = g.add(total, prior_quad)?;
    if let Some(ld) = logdet {
        total = g.add(total, ld)?;
    }
    total = g.add(total, constant).map_err(term("total"))?;

    let scalar = |g: &Graph<'_, T>, v: Var| g.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown {
        const_term,
        logvar_term: scalar(g, logvar),
        logdet_term: logdet.map_or(0.0, |v| scalar(g, v)),
        recon_term: scalar(g, recon),
        q_quad_term,
        prior_quad_term: scalar(g, prior_quad),
        total: scalar(g, total),
    };
    for (name, v) in breakdown.terms() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name });
        }
    }
    Ok((
        LossVars {
            total,
            yhat,
            z,
            prior,
            posterior,
        },
        breakdown,
    ))
}

/// Value-level loss. Accepts `[C, .]` or `[B, C, .]` inputs; returns `yhat`
/// in the same rank as `x`.
pub fn compute_loss<T: Real>(
    model: &Tarfvae<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: &Tensor<T>,
    ablation: Ablation,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let mut g = Graph::new(&model.params);
    let (vars, lifted, bd) = record(model, &mut g, x, y, eps, ablation)?;
    let yhat = g.value(vars.yhat).clone();
    let yhat = if lifted {
        let s = yhat.shape()[1..].to_vec();
        yhat.reshape(&s)?
    } else {
        yhat
    };
    Ok((yhat, bd))
}

/// Loss and parameter gradients.
pub fn loss_and_grad<T: Real>(
    model: &Tarfvae<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: &Tensor<T>,
    ablation: Ablation,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let mut g = Graph::new(&model.params);
    let (vars, _, bd) = record(model, &mut g, x, y, eps, ablation)?;
    let grads = g.backward(vars.total)?;
    Ok((bd, grads))
}

fn lift<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match t.rank() {
        2 => Ok((t.clone().reshape(&[1, t.shape()[0], t.shape()[1]])?, true)),
        3 => Ok((t.clone(), false)),
        _ => Err(shape_err("compute_loss", format!("rank {} input", t.rank()))),
    }
}

fn record<T: Real>(
    model: &Tarfvae<T>,
    g: &mut Graph<'_, T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: &Tensor<T>,
    ablation: Ablation,
) -> Result<(LossVars, bool, LossBreakdown)> {
    let (x, lifted) = lift(x)?;
    let (y, _) = lift(y)?;
    let (eps, _) = lift(eps)?;
    let xv = g.input(x)?;
    let yv = g.input(y)?;
    let ev = g.input(eps)?;
    let (vars, bd) = loss_on(model, g, xv, yv, ev, ablation)?;
    Ok((vars, lifted, bd))
}
