//! The four submodules (prior, encoder, flow, decoder) and their wiring.
//!
//! Training path: `Emb2([x, y]) -> encoder -> z0 -> flow(Emb3([x, y])) -> z
//! -> decoder(z, Emb4(x))`. Inference path: `Emb1(x) -> prior -> z ->
//! decoder`; the encoder and flow are never evaluated when generating.

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{instance_normalize, NORM_EPS};
use crate::error::{shape_err, Error, Result};
use crate::flow::{FlowVars, TarFlow};
use crate::graph::{Graph, Var};
use crate::metrics::ForecastSamples;
use crate::nn::{Linear, MlpBlock, MultiHeadAttention, ParamStore, SeriesEmbedding};
use crate::real::Real;
use crate::rng::{normal_tensor, stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Latent width `D`; also the width of all four series embeddings.
    pub latent_dim: usize,
    pub flow_blocks: usize,
    /// Causal transformer layers inside each flow block.
    pub flow_layers: usize,
    pub mlp_blocks: usize,
    /// Hidden width of every MLP as a multiple of `latent_dim`.
    pub hidden_mult: usize,
    pub heads: usize,
    pub s_max: f64,
    pub logvar_clamp: f64,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            channels,
            lookback,
            horizon,
            latent_dim: 128,
            flow_blocks: 4,
            flow_layers: 1,
            mlp_blocks: 2,
            hidden_mult: 2,
            heads: 4,
            s_max: 5.0,
            logvar_clamp: 10.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_mult * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("latent_dim", self.latent_dim),
            ("flow_layers", self.flow_layers),
            ("hidden_mult", self.hidden_mult),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if !(self.s_max > 0.0) || !(self.logvar_clamp > 0.0) {
            return Err(Error::Config("s_max and logvar_clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Mean and (clamped) log-variance of a diagonal Gaussian, `[B, C, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowOutput<T> {
    pub z: Tensor<T>,
    pub s_sum: T,
    pub per_block_s: Vec<Tensor<T>>,
}

/// MLP stack followed by a `D -> 2D` Gaussian head.
#[derive(Clone, Debug)]
pub struct GaussianNet {
    pub blocks: Vec<MlpBlock>,
    pub head: Linear,
}

impl GaussianNet {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.latent_dim;
        let blocks = (0..cfg.mlp_blocks)
            .map(|i| MlpBlock::new(store, &format!("{name}.mlp{i}"), cfg.channels, d, cfg.hidden(), rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, &format!("{name}.head"), d, 2 * d, true, rng)?;
        Ok(Self { blocks, head })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, clamp: f64) -> Result<GaussianVars> {
        let mut h = h;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let out = self.head.forward(g, h)?;
        let d = self.head.fan_in;
        let mu = g.slice_last(out, 0, d)?;
        let logvar = g.slice_last(out, d, d)?;
        let logvar = g.clamp(logvar, T::from_f64(-clamp), T::from_f64(clamp))?;
        Ok(GaussianVars { mu, logvar })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub emb: SeriesEmbedding,
    pub attn: MultiHeadAttention,
    pub blocks: Vec<MlpBlock>,
    pub out: Linear,
}

/// Forward-call counters per submodule.
#[derive(Debug, Default)]
pub struct ComputeCounters {
    prior: AtomicU64,
    encoder: AtomicU64,
    flow: AtomicU64,
    decoder: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub prior: u64,
    pub encoder: u64,
    pub flow: u64,
    pub decoder: u64,
}

impl ComputeCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            prior: self.prior.load(Ordering::Relaxed),
            encoder: self.encoder.load(Ordering::Relaxed),
            flow: self.flow.load(Ordering::Relaxed),
            decoder: self.decoder.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.prior, &self.encoder, &self.flow, &self.decoder] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Shape statistics of one generation call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateTrace {
    /// Nodes recorded on the tape; independent of horizon and sample count.
    pub graph_nodes: usize,
}

#[derive(Debug)]
pub struct Tarfvae<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub prior_emb: SeriesEmbedding,
    pub prior: GaussianNet,
    pub encoder_emb: SeriesEmbedding,
    pub encoder: GaussianNet,
    pub flow: TarFlow,
    pub decoder: Decoder,
    counters: ComputeCounters,
    logdet_bias: T,
}

impl<T: Real> Clone for Tarfvae<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            prior_emb: self.prior_emb.clone(),
            prior: self.prior.clone(),
            encoder_emb: self.encoder_emb.clone(),
            encoder: self.encoder.clone(),
            flow: self.flow.clone(),
            decoder: self.decoder.clone(),
            counters: ComputeCounters::default(),
            logdet_bias: self.logdet_bias,
        }
    }
}

/// Lifts `[C, W]` to `[1, C, W]`; returns whether it did.
fn batched<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match t.rank() {
        2 => Ok((t.clone().reshape(&[1, t.shape()[0], t.shape()[1]])?, true)),
        3 => Ok((t.clone(), false)),
        _ => Err(shape_err("model input", format!("{:?}", t.shape()))),
    }
}

fn unbatched<T: Real>(t: Tensor<T>, lifted: bool) -> Tensor<T> {
    if lifted {
        let s = t.shape().to_vec();
        t.reshape(&s[1..]).expect("drop unit batch")
    } else {
        t
    }
}

impl<T: Real> Tarfvae<T> {
    /// Fresh model: uniform `±sqrt(1/fan_in)` weights, zero biases, zero
    /// flow heads (every flow block starts as the identity).
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, l, h, d) = (config.channels, config.lookback, config.horizon, config.latent_dim);
        let mut store = ParamStore::new();
        let prior_emb = SeriesEmbedding::new(&mut store, "prior.emb", l, d, rng)?;
        let prior = GaussianNet::new(&mut store, "prior", &config, rng)?;
        let encoder_emb = SeriesEmbedding::new(&mut store, "encoder.emb", l + h, d, rng)?;
        let encoder = GaussianNet::new(&mut store, "encoder", &config, rng)?;
        let flow = TarFlow::new(
            &mut store,
            l + h,
            d,
            config.hidden(),
            config.heads,
            config.flow_blocks,
            config.flow_layers,
            config.s_max,
            rng,
        )?;
        let decoder = Decoder {
            emb: SeriesEmbedding::new(&mut store, "decoder.emb", l, d, rng)?,
            attn: MultiHeadAttention::new(&mut store, "decoder.attn", d, config.heads, rng)?,
            blocks: (0..config.mlp_blocks)
                .map(|i| MlpBlock::new(&mut store, &format!("decoder.mlp{i}"), c, d, config.hidden(), rng))
                .collect::<Result<Vec<_>>>()?,
            out: Linear::new(&mut store, "decoder.out", d, h, true, rng)?,
        };
        Ok(Self {
            config,
            params: store,
            prior_emb,
            prior,
            encoder_emb,
            encoder,
            flow,
            decoder,
            counters: ComputeCounters::default(),
            logdet_bias: T::zero(),
        })
    }

    /// Same architecture with the given parameter values (names and shapes
    /// must match).
    pub fn with_params<U: Real>(config: ModelConfig, params: &ParamStore<U>) -> Result<Self> {
        let mut rng = stream(0, Stream::Init);
        let mut m = Self::new(config, &mut rng)?;
        m.params.assign_from(params)?;
        Ok(m)
    }

    pub fn counters(&self) -> &ComputeCounters {
        &self.counters
    }

    /// Adds a constant to every reported log-det. Test hook for negative
    /// controls; leave at zero otherwise.
    #[doc(hidden)]
    pub fn inject_logdet_bias(&mut self, bias: T) {
        self.logdet_bias = bias;
    }

    fn check_len(&self, op: &'static str, t: &Tensor<T>, len: usize) -> Result<()> {
        let s = t.shape();
        if s.len() != 3 || s[1] != self.config.channels || s[2] != len {
            return Err(shape_err(
                op,
                format!("got {:?}, expected [_, {}, {}]", s, self.config.channels, len),
            ));
        }
        Ok(())
    }

    // ---- graph-level building blocks ---------------------------------

    /// `x: [B, C, L]` (instance-normalized).
    pub fn prior_on(&self, g: &mut Graph<'_, T>, x: Var) -> Result<GaussianVars> {
        ComputeCounters::bump(&self.counters.prior);
        let e = self.prior_emb.forward(g, x)?;
        self.prior.forward(g, e, self.config.logvar_clamp)
    }

    /// `xy: [B, C, L + H]`.
    pub fn encoder_on(&self, g: &mut Graph<'_, T>, xy: Var) -> Result<GaussianVars> {
        ComputeCounters::bump(&self.counters.encoder);
        let e = self.encoder_emb.forward(g, xy)?;
        self.encoder.forward(g, e, self.config.logvar_clamp)
    }

    /// `z0: [B, C, D]`, `xy: [B, C, L + H]`.
    pub fn flow_on(&self, g: &mut Graph<'_, T>, z0: Var, xy: Var) -> Result<FlowVars> {
        let cond = self.flow.cond_emb.forward(g, xy)?;
        self.flow_with_cond_on(g, z0, cond)
    }

    pub fn flow_with_cond_on(&self, g: &mut Graph<'_, T>, z0: Var, cond: Var) -> Result<FlowVars> {
        ComputeCounters::bump(&self.counters.flow);
        let mut out = self.flow.forward(g, z0, cond)?;
        if self.logdet_bias != T::zero() {
            let b = g.input(Tensor::scalar(self.logdet_bias))?;
            out.s_sum = g.add(out.s_sum, b)?;
        }
        Ok(out)
    }

    /// `z0 = mu + exp(logvar / 2) * eps`; `eps` is a constant.
    pub fn reparameterize_on(&self, g: &mut Graph<'_, T>, gp: GaussianVars, eps: Var) -> Result<Var> {
        let half = g.scale(gp.logvar, T::from_f64(0.5))?;
        let sd = g.exp(half)?;
        let noise = g.mul(sd, eps)?;
        g.add(gp.mu, noise)
    }

    /// `z: [B * repeats, C, D]` decoded against `x: [B, C, L]`; every window
    /// is shared by `repeats` consecutive latents.
    pub fn decoder_on(&self, g: &mut Graph<'_, T>, z: Var, x: Var, repeats: usize) -> Result<Var> {
        ComputeCounters::bump(&self.counters.decoder);
        let e = self.decoder.emb.forward(g, x)?;
        let attn = &self.decoder.attn;
        let q = attn.q.forward(g, z)?;
        let mut k = attn.k.forward(g, e)?;
        let mut v = attn.v.forward(g, e)?;
        if repeats > 1 {
            k = g.repeat_each(k, repeats)?;
            v = g.repeat_each(v, repeats)?;
        }
        let a = g.attention(q, k, v, attn.heads, false)?;
        let a = attn.o.forward(g, a)?;
        let mut h = g.add(z, a)?;
        for b in &self.decoder.blocks {
            h = b.forward(g, h)?;
        }
        self.decoder.out.forward(g, h)
    }

    // ---- value-level operations --------------------------------------

    /// Prior `(mu, logvar)` for instance-normalized `x` (`[C, L]` or `[B, C, L]`).
    pub fn prior_forward(&self, x: &Tensor<T>) -> Result<GaussianParams<T>> {
        let (x, lifted) = batched(x)?;
        self.check_len("prior_forward", &x, self.config.lookback)?;
        let mut g = Graph::new(&self.params);
        let xv = g.input(x)?;
        let gp = self.prior_on(&mut g, xv)?;
        Ok(GaussianParams {
            mu: unbatched(g.value(gp.mu).clone(), lifted),
            logvar: unbatched(g.value(gp.logvar).clone(), lifted),
        })
    }

    /// Initial posterior for normalized `x` and `y`, concatenated in time as
    /// `[x, y]`.
    pub fn encoder_forward(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<GaussianParams<T>> {
        let (x, lifted) = batched(x)?;
        let (y, _) = batched(y)?;
        self.check_len("encoder_forward", &x, self.config.lookback)?;
        self.check_len("encoder_forward", &y, self.config.horizon)?;
        let mut g = Graph::new(&self.params);
        let (xv, yv) = (g.input(x)?, g.input(y)?);
        let xy = g.concat_last(xv, yv)?;
        let gp = self.encoder_on(&mut g, xy)?;
        Ok(GaussianParams {
            mu: unbatched(g.value(gp.mu).clone(), lifted),
            logvar: unbatched(g.value(gp.logvar).clone(), lifted),
        })
    }

    /// Conditioning tokens `Emb3([x, y])`.
    pub fn flow_condition(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, lifted) = batched(x)?;
        let (y, _) = batched(y)?;
        let mut g = Graph::new(&self.params);
        let (xv, yv) = (g.input(x)?, g.input(y)?);
        let xy = g.concat_last(xv, yv)?;
        let c = self.flow.cond_emb.forward(&mut g, xy)?;
        Ok(unbatched(g.value(c).clone(), lifted))
    }

    /// Runs the flow on `z0` with conditioning tokens `cond` (both `[C, D]`
    /// or `[B, C, D]`).
    pub fn tarflow_forward(&self, z0: &Tensor<T>, cond: &Tensor<T>) -> Result<FlowOutput<T>> {
        let (z0, lifted) = batched(z0)?;
        let (cond, _) = batched(cond)?;
        let mut g = Graph::new(&self.params);
        let (zv, cv) = (g.input(z0)?, g.input(cond)?);
        let out = self.flow_with_cond_on(&mut g, zv, cv)?;
        Ok(FlowOutput {
            z: unbatched(g.value(out.z).clone(), lifted),
            s_sum: g.value(out.s_sum).data()[0],
            per_block_s: out
                .block_s
                .iter()
                .map(|&s| unbatched(g.value(s).clone(), lifted))
                .collect(),
        })
    }

    /// Inverse of [`Self::tarflow_forward`], recovering tokens one at a time.
    /// Sequential in the channel count; generation never calls it.
    pub fn tarflow_inverse(&self, z: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let (z, lifted) = batched(z)?;
        let (cond, _) = batched(cond)?;
        if z.shape() != cond.shape() {
            return Err(shape_err("tarflow_inverse", format!("{:?} vs {:?}", z.shape(), cond.shape())));
        }
        let (bsz, c, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let reverse = |t: &Tensor<T>| -> Tensor<T> {
            let mut out = t.clone();
            for b in 0..bsz {
                for ch in 0..c {
                    let src = &t.data()[(b * c + c - 1 - ch) * d..(b * c + c - ch) * d];
                    out.data_mut()[(b * c + ch) * d..(b * c + ch + 1) * d].copy_from_slice(src);
                }
            }
            out
        };
        let k_total = self.flow.blocks.len();
        // Bring z into the token order of the last block.
        let mut cur = if k_total > 1 && TarFlow::reversed(k_total - 1) { reverse(&z) } else { z };
        for k in (0..k_total).rev() {
            let block = &self.flow.blocks[k];
            let cond_k = if TarFlow::reversed(k) { reverse(&cond) } else { cond.clone() };
            let mut x = Tensor::<T>::zeros(cur.shape());
            for b in 0..bsz {
                let base = b * c * d;
                x.data_mut()[base..base + d].copy_from_slice(&cur.data()[base..base + d]);
            }
            for j in 1..c {
                let mut g = Graph::new(&self.params);
                let (xv, cv) = (g.input(x.clone())?, g.input(cond_k.clone())?);
                let (s, t) = block.scale_shift(&mut g, xv, cv, self.flow.s_max)?;
                let (s, t) = (g.value(s), g.value(t));
                for b in 0..bsz {
                    for e in 0..d {
                        let i = (b * c + j) * d + e;
                        let v = cur.data()[i] * (-s.data()[i]).exp() + t.data()[i];
                        if !v.is_finite() {
                            return Err(Error::NonFinite { op: "tarflow_inverse" });
                        }
                        x.data_mut()[i] = v;
                    }
                }
            }
            // x is this block's input, in this block's order; the previous
            // block produced it in the opposite order.
            cur = if k > 0 { reverse(&x) } else { x };
        }
        Ok(unbatched(cur, lifted))
    }

    /// Decodes latents `z` against normalized `x`; output on the normalized
    /// scale.
    pub fn decoder_forward(&self, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (z, lifted) = batched(z)?;
        let (x, _) = batched(x)?;
        self.check_len("decoder_forward", &x, self.config.lookback)?;
        self.check_len("decoder_forward", &z, self.config.latent_dim)?;
        if z.shape()[0] % x.shape()[0] != 0 {
            return Err(shape_err(
                "decoder_forward",
                format!("{} latents for {} windows", z.shape()[0], x.shape()[0]),
            ));
        }
        let repeats = z.shape()[0] / x.shape()[0];
        let mut g = Graph::new(&self.params);
        let (zv, xv) = (g.input(z)?, g.input(x)?);
        let y = self.decoder_on(&mut g, zv, xv, repeats)?;
        Ok(unbatched(g.value(y).clone(), lifted))
    }

    /// `S` forecasts for one raw lookback window `[C, L]`, on the scale of
    /// the input. Deterministic in `seed`.
    pub fn generate(&self, x_raw: &Tensor<f64>, samples: usize, seed: u64) -> Result<ForecastSamples> {
        let mut rng = stream(seed, Stream::Sample);
        let mut out = self.generate_batch(core::slice::from_ref(x_raw), samples, &mut rng)?;
        Ok(out.pop().expect("one window"))
    }

    /// Generation for several windows in one batched pass.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        windows: &[Tensor<f64>],
        samples: usize,
        rng: &mut R,
    ) -> Result<Vec<ForecastSamples>> {
        self.generate_traced(windows, samples, rng).map(|(s, _)| s)
    }

    pub fn generate_traced<R: Rng + ?Sized>(
        &self,
        windows: &[Tensor<f64>],
        samples: usize,
        rng: &mut R,
    ) -> Result<(Vec<ForecastSamples>, GenerateTrace)> {
        if samples == 0 {
            return Err(Error::TooFewSamples { required: 1, got: 0 });
        }
        let (c, l, h, d) = (
            self.config.channels,
            self.config.lookback,
            self.config.horizon,
            self.config.latent_dim,
        );
        let bsz = windows.len();
        let mut stats = Vec::with_capacity(bsz);
        let mut xs = Vec::with_capacity(bsz * c * l);
        for w in windows {
            if w.shape() != [c, l] {
                return Err(shape_err("generate", format!("window {:?}, expected [{c}, {l}]", w.shape())));
            }
            let (xn, _, st) = instance_normalize(w, None, NORM_EPS)?;
            xs.extend(xn.data().iter().map(|&v| T::from_f64(v)));
            stats.push(st);
        }
        let eps = normal_tensor::<T, R>(&[bsz * samples, c, d], rng);

        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::new(&[bsz, c, l], xs)?)?;
        let prior = self.prior_on(&mut g, x)?;
        let (mu, logvar) = if samples > 1 {
            (g.repeat_each(prior.mu, samples)?, g.repeat_each(prior.logvar, samples)?)
        } else {
            (prior.mu, prior.logvar)
        };
        let eps = g.input(eps)?;
        let z = self.reparameterize_on(&mut g, GaussianVars { mu, logvar }, eps)?;
        let yhat = self.decoder_on(&mut g, z, x, samples)?;
        let trace = GenerateTrace { graph_nodes: g.len() };

        let yv = g.value(yhat).data();
        let per = samples * c * h;
        let mut out = Vec::with_capacity(bsz);
        for (b, st) in stats.iter().enumerate() {
            let norm = Tensor::new(
                &[samples, c, h],
                yv[b * per..(b + 1) * per].iter().map(|v| v.as_f64()).collect(),
            )?;
            out.push(ForecastSamples::new(st.invert(&norm)?)?);
        }
        Ok((out, trace))
    }
}

/// Value-level reparameterization, `mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(gp: &GaussianParams<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if gp.mu.shape() != gp.logvar.shape() || gp.mu.shape() != eps.shape() {
        return Err(shape_err(
            "reparameterize",
            format!("mu {:?}, logvar {:?}, eps {:?}", gp.mu.shape(), gp.logvar.shape(), eps.shape()),
        ));
    }
    let half = T::from_f64(0.5);
    let data = gp
        .mu
        .data()
        .iter()
        .zip(gp.logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect();
    Tensor::new(gp.mu.shape(), data)
}
