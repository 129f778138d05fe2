//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every primitive
//! applied during a forward pass, and [`Graph::backward`] walks the tape in
//! reverse to produce gradients for the parameters that were touched.
//! Every primitive checks its output for NaN/Inf and reports the
//! producing op by name.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::real::{norm_cdf, norm_pdf, Real};
use crate::tensor::{axpy, dot, linear_kernel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Clamp(Var, T, T),
    ConcatLast(Var, Var),
    SliceLast { a: Var, start: usize },
    TransposeLast2(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ReverseTokens(Var),
    ShiftTokens(Var),
    RepeatEach(Var, usize),
    Sum(Var),
}

struct Node<T> {
    slot: Slot<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like the parameter when it was not
    /// reached by the backward pass.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }

    /// Flattens all gradients in parameter order (missing ones as zeros).
    pub fn flatten(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (id, _, p) in store.iter() {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(core::iter::repeat_n(T::zero(), p.len())),
            }
        }
        out
    }
}

pub struct Graph<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Linear { x, w, b } => {
                self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatLast(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SliceLast { a, .. }
            | Op::TransposeLast2(a)
            | Op::ReverseTokens(a)
            | Op::ShiftTokens(a)
            | Op::RepeatEach(a, _)
            | Op::Sum(a) => self.needs(*a),
        };
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            slot: Slot::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Which parameters have been bound on this tape.
    pub fn touched(&self, id: ParamId) -> bool {
        self.param_vars[id.index()].is_some()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err(
                "linear",
                format!("input {:?} against weight {:?}", xs, ws),
            ));
        }
        let (fout, fin) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), fout),
                ));
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fout;
        let mut out = Tensor::zeros(&shape);
        linear_kernel(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            fin,
            fout,
            out.data_mut(),
        );
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.exp());
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a), "tanh")
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), "square")
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("{:?} with {:?}", sa, sb)));
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let rows = self.value(a).len() / wa.max(1);
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&self.value(b).data()[r * wb..(r + 1) * wb]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::ConcatLast(a, b), "concat")
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let w = self.value(a).last_dim();
        if start + len > w {
            return Err(shape_err(
                "slice",
                format!("range {}..{} of width {}", start, start + len, w),
            ));
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        let rows = self.value(a).len() / w.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * w + start..r * w + start + len]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::SliceLast { a, start }, "slice")
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank {} input", s.len())));
        }
        let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for (b, chunk) in src.chunks(n * m).enumerate() {
            let dst = &mut data[b * n * m..(b + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    dst[j * n + i] = chunk[i * m + j];
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::TransposeLast2(a), "transpose")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, n, E]`, `k, v: [B, m, E]` with `E` split into `heads` equal
    /// slices. With `causal`, query `i` only sees keys `j <= i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
            ));
        }
        let (bsz, n, e) = (qs[0], qs[1], qs[2]);
        let m = ks[1];
        if heads == 0 || e % heads != 0 || (causal && n != m) {
            return Err(shape_err(
                "attention",
                format!("{} heads over width {}, causal={} n={} m={}", heads, e, causal, n, m),
            ));
        }
        let dh = e / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); bsz * n * e];
        let mut probs = vec![T::zero(); bsz * heads * n * m];
        for b in 0..bsz {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = &qd[(b * n + i) * e + off..(b * n + i) * e + off + dh];
                    let p = &mut probs[((b * heads + h) * n + i) * m..((b * heads + h) * n + i + 1) * m];
                    let visible = if causal { i + 1 } else { m };
                    let mut mx = T::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let kj = &kd[(b * m + j) * e + off..(b * m + j) * e + off + dh];
                        *pj = dot(qi, kj) * scale;
                        mx = mx.max(*pj);
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut().take(visible) {
                        *pj = (*pj - mx).exp();
                        z = z + *pj;
                    }
                    let oi = &mut out[(b * n + i) * e + off..(b * n + i) * e + off + dh];
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        *pj = *pj / z;
                        let vj = &vd[(b * m + j) * e + off..(b * m + j) * e + off + dh];
                        axpy(*pj, vj, oi);
                    }
                }
            }
        }
        let out = Tensor::new(&[bsz, n, e], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Reverses token order along axis -2.
    pub fn reverse_tokens(&mut self, a: Var) -> Result<Var> {
        let out = token_map(self.value(a), |c, n| n - 1 - c, "reverse")?;
        self.push(out, Op::ReverseTokens(a), "reverse")
    }

    /// Shifts tokens one position later along axis -2, zero-filling token 0.
    pub fn shift_tokens(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(shape_err("shift", format!("rank {} input", s.len())));
        }
        let (n, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut data = vec![T::zero(); t.len()];
        for (b, chunk) in t.data().chunks(n * w).enumerate() {
            let dst = &mut data[b * n * w..(b + 1) * n * w];
            if n > 1 {
                dst[w..].copy_from_slice(&chunk[..(n - 1) * w]);
            }
        }
        let out = Tensor::new(s, data)?;
        self.push(out, Op::ShiftTokens(a), "shift")
    }

    /// Repeats every entry of axis 0 `times` times consecutively.
    pub fn repeat_each(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let mut shape = t.shape().to_vec();
        let inner = t.len() / shape[0].max(1);
        shape[0] *= times;
        let mut data = Vec::with_capacity(t.len() * times);
        for chunk in t.data().chunks(inner.max(1)) {
            for _ in 0..times {
                data.extend_from_slice(chunk);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::RepeatEach(a, times), "repeat")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let (Op::Leaf, Slot::Param(_)) = (&node.op, &node.slot) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
        }

        let mut out: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                out[pid] = grads[v.0].take();
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, g: Tensor<T>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => axpy(T::one(), g.data(), acc.data_mut()),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.needs(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(target)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = match &self.nodes[i].slot {
            Slot::Owned(t) => t,
            Slot::Param(_) => unreachable!(),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (fout, fin) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fin;
                let gyd = gy.data();
                self.accumulate_with(grads, *x, |dx| {
                    for r in 0..rows {
                        let dxr = &mut dx[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            axpy(gyd[r * fout + o], &wv.data()[o * fin..(o + 1) * fin], dxr);
                        }
                    }
                });
                self.accumulate_with(grads, *w, |dw| {
                    for r in 0..rows {
                        let xr = &xv.data()[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            axpy(gyd[r * fout + o], xr, &mut dw[o * fin..(o + 1) * fin]);
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for r in 0..rows {
                            axpy(T::one(), &gyd[r * fout..(r + 1) * fout], db);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), o) in d.iter_mut().zip(gy.data()).zip(bv.data()) {
                        *d = *d + *g * *o;
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for ((d, g), o) in d.iter_mut().zip(gy.data()).zip(av.data()) {
                        *d = *d + *g * *o;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.map(|v| v * *c)),
            Op::Exp(a) => {
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), e) in d.iter_mut().zip(gy.data()).zip(y.data()) {
                        *d = *d + *g * *e;
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), t) in d.iter_mut().zip(gy.data()).zip(y.data()) {
                        *d = *d + *g * (T::one() - *t * *t);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gy.data()).zip(xv.data()) {
                        *d = *d + *g * gelu_grad(*x);
                    }
                });
            }
            Op::Square(a) => {
                let xv = self.value(*a);
                let two = T::from_f64(2.0);
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gy.data()).zip(xv.data()) {
                        *d = *d + *g * two * *x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a);
                self.accumulate_with(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gy.data()).zip(xv.data()) {
                        if *x >= *lo && *x <= *hi {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (wa, wb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let w = wa + wb;
                let rows = gy.len() / w.max(1);
                self.accumulate_with(grads, *a, |d| {
                    for r in 0..rows {
                        axpy(T::one(), &gy.data()[r * w..r * w + wa], &mut d[r * wa..(r + 1) * wa]);
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for r in 0..rows {
                        axpy(T::one(), &gy.data()[r * w + wa..(r + 1) * w], &mut d[r * wb..(r + 1) * wb]);
                    }
                });
            }
            Op::SliceLast { a, start } => {
                let w = self.value(*a).last_dim();
                let len = gy.last_dim();
                let rows = gy.len() / len.max(1);
                self.accumulate_with(grads, *a, |d| {
                    for r in 0..rows {
                        axpy(
                            T::one(),
                            &gy.data()[r * len..(r + 1) * len],
                            &mut d[r * w + start..r * w + start + len],
                        );
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let s = self.shape(*a);
                let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate_with(grads, *a, |d| {
                    for (b, chunk) in gy.data().chunks(n * m).enumerate() {
                        let dst = &mut d[b * n * m..(b + 1) * n * m];
                        for j in 0..m {
                            for i in 0..n {
                                dst[i * m + j] = dst[i * m + j] + chunk[j * n + i];
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gy, grads),
            Op::ReverseTokens(a) => {
                let g = token_map(gy, |c, n| n - 1 - c, "reverse").expect("shape checked");
                self.accumulate(grads, *a, g);
            }
            Op::ShiftTokens(a) => {
                let s = gy.shape();
                let (n, w) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate_with(grads, *a, |d| {
                    for (b, chunk) in gy.data().chunks(n * w).enumerate() {
                        let dst = &mut d[b * n * w..(b + 1) * n * w];
                        if n > 1 {
                            axpy(T::one(), &chunk[w..], &mut dst[..(n - 1) * w]);
                        }
                    }
                });
            }
            Op::RepeatEach(a, times) => {
                let inner = self.value(*a).len() / self.shape(*a)[0].max(1);
                self.accumulate_with(grads, *a, |d| {
                    for (r, chunk) in gy.data().chunks(inner.max(1)).enumerate() {
                        let src = r / times;
                        axpy(T::one(), chunk, &mut d[src * inner..(src + 1) * inner]);
                    }
                });
            }
            Op::Sum(a) => {
                let g = gy.data()[0];
                self.accumulate_with(grads, *a, |d| {
                    for v in d.iter_mut() {
                        *v = *v + g;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qs, ks) = (self.shape(q), self.shape(k));
        let (bsz, n, e, m) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = e / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let gyd = gy.data();
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut ds = vec![T::zero(); m];
        for b in 0..bsz {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let p = &probs[((b * heads + h) * n + i) * m..((b * heads + h) * n + i + 1) * m];
                    let go = &gyd[(b * n + i) * e + off..(b * n + i) * e + off + dh];
                    // dP_ij = go . v_j ; dV_j += p_ij * go
                    let mut inner = T::zero();
                    for j in 0..m {
                        let vj = (b * m + j) * e + off;
                        ds[j] = dot(go, &vd[vj..vj + dh]);
                        inner = inner + ds[j] * p[j];
                        axpy(p[j], go, &mut dv[vj..vj + dh]);
                    }
                    let qi = (b * n + i) * e + off;
                    for j in 0..m {
                        let s = p[j] * (ds[j] - inner) * scale;
                        if s == T::zero() {
                            continue;
                        }
                        let kj = (b * m + j) * e + off;
                        axpy(s, &kd[kj..kj + dh], &mut dq[qi..qi + dh]);
                        axpy(s, &qd[qi..qi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }
        let dq = Tensor::new(qs, dq).expect("shape");
        let dk = Tensor::new(ks, dk).expect("shape");
        let dv = Tensor::new(ks, dv).expect("shape");
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

fn token_map<T: Real>(
    t: &Tensor<T>,
    src_of: impl Fn(usize, usize) -> usize,
    op: &'static str,
) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(shape_err(op, format!("rank {} input", s.len())));
    }
    let (n, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut data = vec![T::zero(); t.len()];
    for (b, chunk) in t.data().chunks(n * w).enumerate() {
        let dst = &mut data[b * n * w..(b + 1) * n * w];
        for c in 0..n {
            let src = src_of(c, n);
            dst[c * w..(c + 1) * w].copy_from_slice(&chunk[src * w..(src + 1) * w]);
        }
    }
    Tensor::new(s, data)
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * norm_cdf(x)
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    norm_cdf(x) + x * norm_pdf(x)
}
