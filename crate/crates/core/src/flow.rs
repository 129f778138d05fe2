//! Conditional transformer-autoregressive flow over channel tokens.
//!
//! Each block reads `u = z + cond` with a causal transformer, shifts its
//! output one token later so position `j` only sees tokens `< j`, and maps
//! token `j` to `(z_j - t_j) * exp(s_j)`. Token 0 passes through
//! unchanged. Blocks alternate between original and reversed token order;
//! the final output is returned in the original order.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{CausalTransformerBlock, Linear, ParamStore, SeriesEmbedding};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct FlowBlock {
    pub layers: Vec<CausalTransformerBlock>,
    /// `D -> 2D` head emitting raw `s` then `t`; zero-initialized.
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct TarFlow {
    pub cond_emb: SeriesEmbedding,
    pub blocks: Vec<FlowBlock>,
    pub width: usize,
    pub s_max: f64,
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct FlowVars {
    pub z: Var,
    /// Scalar sum of every emitted `s` (the log-det of the whole map,
    /// summed over the batch).
    pub s_sum: Var,
    /// Per-block `s`, in the token order that block operated in.
    pub block_s: Vec<Var>,
}

impl FlowBlock {
    /// `(s, t)` for every token of `x` given the conditioning tokens.
    /// Both are zero at token 0 and depend only on tokens `< j` at `j`.
    pub fn scale_shift<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        cond: Var,
        s_max: f64,
    ) -> Result<(Var, Var)> {
        let d = self.head.fan_in;
        let mut h = g.add(x, cond)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        let st = self.head.forward(g, h)?;
        let st = g.shift_tokens(st)?;
        let raw = g.slice_last(st, 0, d)?;
        let t = g.slice_last(st, d, d)?;
        // s = s_max * tanh(raw / s_max)
        let s = g.scale(raw, T::from_f64(1.0 / s_max))?;
        let s = g.tanh(s)?;
        let s = g.scale(s, T::from_f64(s_max))?;
        Ok((s, t))
    }
}

impl TarFlow {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cond_len: usize,
        width: usize,
        hidden: usize,
        heads: usize,
        blocks: usize,
        layers: usize,
        s_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cond_emb = SeriesEmbedding::new(store, "flow.emb", cond_len, width, rng)?;
        let blocks = (0..blocks)
            .map(|k| {
                let layers = (0..layers)
                    .map(|l| {
                        CausalTransformerBlock::new(
                            store,
                            &format!("flow.block{k}.layer{l}"),
                            width,
                            hidden,
                            heads,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let head = Linear::zeros(store, &format!("flow.block{k}.head"), width, 2 * width)?;
                Ok(FlowBlock { layers, head })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cond_emb,
            blocks,
            width,
            s_max,
        })
    }

    /// Whether block `k` runs on reversed tokens.
    #[inline]
    pub fn reversed(k: usize) -> bool {
        k % 2 == 1
    }

    /// `z0, cond: [B, C, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z0: Var, cond: Var) -> Result<FlowVars> {
        if g.shape(z0) != g.shape(cond) || g.value(z0).last_dim() != self.width {
            return Err(shape_err(
                "tarflow",
                format!("z0 {:?}, cond {:?}, width {}", g.shape(z0), g.shape(cond), self.width),
            ));
        }
        let mut z = z0;
        let mut c = cond;
        let mut s_sum: Option<Var> = None;
        let mut block_s = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                z = g.reverse_tokens(z)?;
                c = g.reverse_tokens(c)?;
            }
            let (s, t) = block.scale_shift(g, z, c, self.s_max)?;
            let centered = g.sub(z, t)?;
            let gain = g.exp(s)?;
            z = g.mul(centered, gain)?;
            let ssum = g.sum(s)?;
            s_sum = Some(match s_sum {
                Some(acc) => g.add(acc, ssum)?,
                None => ssum,
            });
            block_s.push(s);
        }
        if self.blocks.len() > 1 && Self::reversed(self.blocks.len() - 1) {
            z = g.reverse_tokens(z)?;
        }
        let s_sum = match s_sum {
            Some(v) => v,
            None => {
                let zero = g.scale(z0, T::zero())?;
                g.sum(zero)?
            }
        };
        Ok(FlowVars { z, s_sum, block_s })
    }
}
