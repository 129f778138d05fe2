//! Parameter storage and the layers the model is assembled from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    /// Mutable access to the values; the shape stays fixed.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        self.tensors[id.0].data_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn assign_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (id, name, src) in other.iter() {
            let dst_id = self
                .id(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let dst = &mut self.tensors[dst_id.0];
            if dst.shape() != src.shape() {
                return Err(shape_err(
                    "assign",
                    format!("`{}`: {:?} vs {:?}", other.name(id), dst.shape(), src.shape()),
                ));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::from_f64(s.as_f64());
            }
        }
        Ok(())
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err(
                "set_flat",
                format!("{} values for {} scalars", flat.len(), self.num_scalars()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Uniform `±sqrt(1/fan_in)` initializer.
pub fn uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

/// Dense layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.weight"),
            uniform_init(&[fan_out, fan_in], fan_in, rng),
        )?;
        let b = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// Zero-initialized variant.
    pub fn zeros<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.weight"), Tensor::zeros(&[fan_out, fan_in]))?;
        let b = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?);
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Maps each channel's length-`T` series to one `E`-wide token with a shared
/// linear layer.
#[derive(Clone, Debug)]
pub struct SeriesEmbedding {
    pub proj: Linear,
}

impl SeriesEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        len: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, len, width, true, rng)?,
        })
    }

    pub fn input_len(&self) -> usize {
        self.proj.fan_in
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.proj.fan_in {
            return Err(shape_err(
                "series_embedding",
                format!(
                    "series length {} but layer expects {}",
                    g.value(x).last_dim(),
                    self.proj.fan_in
                ),
            ));
        }
        self.proj.forward(g, x)
    }
}

/// Residual feature-mixing sublayer followed by a residual channel-mixing
/// sublayer, both `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub feat_in: Linear,
    pub feat_out: Linear,
    pub chan_in: Linear,
    pub chan_out: Linear,
}

impl MlpBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            feat_in: Linear::new(store, &format!("{name}.feat_in"), width, hidden, true, rng)?,
            feat_out: Linear::new(store, &format!("{name}.feat_out"), hidden, width, true, rng)?,
            chan_in: Linear::new(store, &format!("{name}.chan_in"), channels, hidden, true, rng)?,
            chan_out: Linear::new(store, &format!("{name}.chan_out"), hidden, channels, true, rng)?,
        })
    }

    /// `h: [B, C, F]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let s = g.shape(h);
        if s.len() != 3 || s[2] != self.feat_in.fan_in || s[1] != self.chan_in.fan_in {
            return Err(shape_err(
                "mlp_block",
                format!(
                    "input {:?}, block expects [_, {}, {}]",
                    s, self.chan_in.fan_in, self.feat_in.fan_in
                ),
            ));
        }
        let a = self.feat_in.forward(g, h)?;
        let a = g.gelu(a)?;
        let a = self.feat_out.forward(g, a)?;
        let h = g.add(h, a)?;

        let t = g.transpose_last2(h)?;
        let c = self.chan_in.forward(g, t)?;
        let c = g.gelu(c)?;
        let c = self.chan_out.forward(g, c)?;
        let c = g.transpose_last2(c)?;
        g.add(h, c)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true, rng)?,
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, key)?;
        let v = self.v.forward(g, value)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        self.o.forward(g, a)
    }
}

/// Pre-activation-free transformer block: residual causal self-attention
/// then a residual feature MLP. Output token `i` depends on input tokens
/// `0..=i` only.
#[derive(Clone, Debug)]
pub struct CausalTransformerBlock {
    pub attn: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl CausalTransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, hidden, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), hidden, width, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        if g.value(tokens).last_dim() != self.ff_in.fan_in {
            return Err(shape_err(
                "causal_transformer_block",
                format!(
                    "token width {} but block expects {}",
                    g.value(tokens).last_dim(),
                    self.ff_in.fan_in
                ),
            ));
        }
        let a = self.attn.forward(g, tokens, tokens, tokens, true)?;
        let h = g.add(tokens, a)?;
        let f = self.ff_in.forward(g, h)?;
        let f = g.gelu(f)?;
        let f = self.ff_out.forward(g, f)?;
        g.add(h, f)
    }
}

/// Single-head `softmax(Q K^T / sqrt(d) + mask) V` on plain matrices
/// (`q: n x d`, `k, v: m x d`).
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err("attention", "expected matrices".to_string()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let qv = g.input(q.clone().reshape(&[1, n, d])?)?;
    let kv = g.input(k.clone().reshape(&[1, m, k.shape()[1]])?)?;
    let vv = g.input(v.clone().reshape(&[1, v.shape()[0], v.shape()[1]])?)?;
    let out = g.attention(qv, kv, vv, 1, causal)?;
    g.value(out).clone().reshape(&[n, d])
}
