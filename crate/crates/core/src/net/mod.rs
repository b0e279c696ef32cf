//! The posterior network.
//!
//! Each token of `x_s` is looked up in a shared embedding table, the
//! per-position embeddings are concatenated in position order, 16 Fourier
//! features of the local time `s` are appended, and an MLP with ReLU between
//! its affine layers maps the result to `n_tokens x vocab` logits. A softmax
//! over each position's vocab row is the predicted posterior of the target
//! token `x_1^i` given `(s, x_s)`.
//!
//! The general generator parameterization has one output head per mixture
//! component (an `N x J x V` tensor). With the two-delta path only the target
//! component carries a learnable distribution; the source component's
//! contribution is the `delta_{x_s}` term of the assembled rate, so a single
//! head is enough.
//!
//! All parameters live in one flat buffer laid out as: embedding table
//! (`vocab x embed_dim`), then for each layer its weight (`in x out`,
//! row-major) followed by its bias.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, LineageEntry, CHECKPOINT_FORMAT};
pub use optim::AmsGrad;

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::rng::RngStream;

pub const TIME_FEATURES: usize = 16;

/// Floating-point element type of the network.
pub trait Scalar: NdFloat {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// `[sin(pi k s), cos(pi k s)]` for `k = 1..=8`. Half periods keep `s = 0`
/// and `s = 1` apart.
pub fn time_features(s: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for k in 1..=8 {
        let a = PI * k as f64 * s;
        f[2 * (k - 1)] = a.sin();
        f[2 * (k - 1) + 1] = a.cos();
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub n_tokens: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
}

impl NetDims {
    pub fn new(spec: GridSpec, embed_dim: usize, hidden_dim: usize, n_layers: usize) -> Result<Self> {
        if embed_dim == 0 || hidden_dim == 0 || n_layers < 2 {
            return Err(Error::invalid(
                "network needs embed_dim, hidden_dim > 0 and at least 2 layers",
            ));
        }
        Ok(Self {
            n_tokens: spec.n_tokens,
            vocab: spec.vocab as usize,
            embed_dim,
            hidden_dim,
            n_layers,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            n_tokens: self.n_tokens,
            vocab: self.vocab as u32,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_tokens * self.embed_dim + TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.n_tokens * self.vocab
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .map(|l| {
                let fan_in = if l == 0 { self.input_dim() } else { self.hidden_dim };
                let fan_out = if l + 1 == self.n_layers {
                    self.output_dim()
                } else {
                    self.hidden_dim
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    fn layout(&self) -> Vec<LayerSlot> {
        let mut off = self.vocab * self.embed_dim;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    w: off,
                    b: off + fan_in * fan_out,
                };
                off = slot.b + fan_out;
                slot
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        let last = *self.layout().last().expect("at least one layer");
        last.b + last.fan_out
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// One training example: local time, current state, and target state.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub s: Vec<f64>,
    pub xs: Vec<u32>,
    pub x1: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn push(&mut self, s: f64, xs: &[u32], x1: &[u32]) {
        self.s.push(s);
        self.xs.extend_from_slice(xs);
        self.x1.extend_from_slice(x1);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    dims: NetDims,
    data: Vec<T>,
}

/// Post-activation outputs of every layer for one batch; `acts[0]` is the
/// network input and the last entry is the logits.
struct Activations<T> {
    acts: Vec<Array2<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases, a zero
    /// final layer (uniform initial posterior), and embeddings drawn from
    /// `(-1, 1)` (one active input per row, so fan-in 1).
    pub fn init(dims: NetDims, rng: &mut RngStream) -> Self {
        Self::init_with(dims, rng, true)
    }

    /// Like [`ModelParams::init`] but with a random final layer as well.
    pub fn init_random_head(dims: NetDims, rng: &mut RngStream) -> Self {
        Self::init_with(dims, rng, false)
    }

    fn init_with(dims: NetDims, rng: &mut RngStream, zero_head: bool) -> Self {
        let mut data = vec![T::zero(); dims.n_params()];
        let n_embed = dims.vocab * dims.embed_dim;
        for v in &mut data[..n_embed] {
            *v = T::of(rng.random_range(-1.0..1.0));
        }
        let layout = dims.layout();
        for (l, slot) in layout.iter().enumerate() {
            if zero_head && l + 1 == layout.len() {
                continue;
            }
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut data[slot.w..slot.b + slot.fan_out] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Self { dims, data }
    }

    pub fn from_flat(dims: NetDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a network with {} parameters",
                data.len(),
                dims.n_params()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn weight(&self, slot: &LayerSlot) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((slot.fan_in, slot.fan_out), &self.data[slot.w..slot.b])
            .expect("layout matches buffer")
    }

    fn bias(&self, slot: &LayerSlot) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[slot.b..slot.b + slot.fan_out])
    }

    fn check_batch(&self, s: &[f64], xs: &[u32]) -> Result<()> {
        let n = self.dims.n_tokens;
        if xs.len() != s.len() * n {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for {} examples of {n} tokens",
                xs.len(),
                s.len()
            )));
        }
        if let Some(&t) = xs.iter().find(|&&t| t as usize >= self.dims.vocab) {
            return Err(Error::DimensionMismatch(format!(
                "token {t} outside network vocab {}",
                self.dims.vocab
            )));
        }
        if let Some(&bad) = s.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("local time {bad} outside [0, 1]")));
        }
        Ok(())
    }

    fn input(&self, s: &[f64], xs: &[u32]) -> Array2<T> {
        let d = &self.dims;
        let e = d.embed_dim;
        let mut input = Array2::<T>::zeros((s.len(), d.input_dim()));
        for (b, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for i in 0..d.n_tokens {
                let tok = xs[b * d.n_tokens + i] as usize;
                row[i * e..(i + 1) * e].copy_from_slice(&self.data[tok * e..(tok + 1) * e]);
            }
            for (dst, f) in row[d.n_tokens * e..].iter_mut().zip(time_features(s[b])) {
                *dst = T::of(f);
            }
        }
        input
    }

    fn forward_acts(&self, s: &[f64], xs: &[u32]) -> Activations<T> {
        let layout = self.dims.layout();
        let mut acts = Vec::with_capacity(layout.len() + 1);
        acts.push(self.input(s, xs));
        for (l, slot) in layout.iter().enumerate() {
            let prev = acts.last().expect("input pushed");
            let mut z = Array2::<T>::zeros((prev.nrows(), slot.fan_out));
            z.assign(&self.bias(slot).broadcast((prev.nrows(), slot.fan_out)).unwrap());
            general_mat_mul(T::one(), prev, &self.weight(slot), T::one(), &mut z);
            if l + 1 < layout.len() {
                z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            acts.push(z);
        }
        Activations { acts }
    }

    /// Logits for a batch, `batch x (n_tokens * vocab)`.
    pub fn forward_batch(&self, s: &[f64], xs: &[u32]) -> Result<Array2<T>> {
        self.check_batch(s, xs)?;
        Ok(self.forward_acts(s, xs).acts.pop().expect("non-empty"))
    }

    /// Logits for one state, `n_tokens x vocab`.
    pub fn forward(&self, s: f64, x: &[u32]) -> Result<Array2<T>> {
        let logits = self.forward_batch(&[s], x)?;
        Ok(logits
            .into_shape_with_order((self.dims.n_tokens, self.dims.vocab))
            .expect("row of n_tokens * vocab"))
    }

    /// Softmax posteriors for a batch sharing one local time, flattened as
    /// `batch x n_tokens x vocab`.
    pub fn posterior_batch(&self, s: f64, xs: &[u32]) -> Result<Vec<f64>> {
        let n = xs.len() / self.dims.n_tokens.max(1);
        let times = vec![s; n];
        let logits = self.forward_batch(&times, xs)?;
        let v = self.dims.vocab;
        let mut out = Vec::with_capacity(logits.len());
        for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
            let row = row.as_slice().expect("standard layout");
            for block in row.chunks_exact(v) {
                let max = block.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
                let start = out.len();
                let mut sum = 0.0;
                for x in block {
                    let e = (x.f64() - max).exp();
                    sum += e;
                    out.push(e);
                }
                if !(sum.is_finite() && sum > 0.0) {
                    return Err(Error::Numerical {
                        context: format!("posterior for batch row {b}"),
                        msg: "non-finite logits".into(),
                    });
                }
                for p in &mut out[start..] {
                    *p /= sum;
                }
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy of the posterior against the target tokens over
    /// every example and position, with gradients by backpropagation.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::invalid("loss_and_grads: empty batch"));
        }
        self.check_batch(&batch.s, &batch.xs)?;
        if batch.x1.len() != batch.xs.len() {
            return Err(Error::DimensionMismatch("x1 and xs lengths differ".into()));
        }
        let d = self.dims;
        let (n, v) = (d.n_tokens, d.vocab);
        let mut fw = self.forward_acts(&batch.s, &batch.xs);
        let mut dz = fw.acts.pop().expect("logits");
        let scale = 1.0 / (batch.len() * n) as f64;
        let mut loss = 0.0f64;
        for (b, mut row) in dz.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for (i, block) in row.chunks_exact_mut(v).enumerate() {
                let target = batch.x1[b * n + i] as usize;
                if target >= v {
                    return Err(Error::DimensionMismatch(format!(
                        "target token {target} outside vocab {v}"
                    )));
                }
                let max = block.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut sum = T::zero();
                for x in block.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let lse = max + sum.ln();
                let logit_t = max + (block[target]).ln();
                let term = (lse - logit_t).f64();
                if !term.is_finite() {
                    return Err(Error::Numerical {
                        context: format!("batch index {b}"),
                        msg: format!("non-finite loss term {term}"),
                    });
                }
                loss += term;
                let sc = T::of(scale);
                for x in block.iter_mut() {
                    *x = *x / sum * sc;
                }
                block[target] -= sc;
            }
        }
        loss *= scale;

        let mut grads = vec![T::zero(); self.data.len()];
        let layout = d.layout();
        for (l, slot) in layout.iter().enumerate().rev() {
            let a_prev = &fw.acts[l];
            {
                let mut gw = ArrayViewMut2::from_shape(
                    (slot.fan_in, slot.fan_out),
                    &mut grads[slot.w..slot.b],
                )
                .expect("layout");
                general_mat_mul(T::one(), &a_prev.t(), &dz, T::zero(), &mut gw);
            }
            let gb = dz.sum_axis(Axis(0));
            grads[slot.b..slot.b + slot.fan_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, &x)| *g = x);
            let mut da = Array2::<T>::zeros((a_prev.nrows(), slot.fan_in));
            general_mat_mul(T::one(), &dz, &self.weight(slot).t(), T::zero(), &mut da);
            if l > 0 {
                // a_prev is a ReLU output, so its positivity is the derivative mask
                ndarray::Zip::from(&mut da).and(a_prev).for_each(|g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            dz = da;
        }
        let e = d.embed_dim;
        for (b, row) in dz.axis_iter(Axis(0)).enumerate() {
            let row = row.as_slice().expect("standard layout");
            for i in 0..n {
                let tok = batch.xs[b * n + i] as usize;
                let g = &mut grads[tok * e..(tok + 1) * e];
                for (gj, &dj) in g.iter_mut().zip(&row[i * e..(i + 1) * e]) {
                    *gj += dj;
                }
            }
        }
        fw.acts.clear();
        Ok((loss, grads))
    }

    /// Loss only, for finite-difference checks and evaluation.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(&batch.s, &batch.xs)?;
        let logits = self.forward_batch(&batch.s, &batch.xs)?;
        let (n, v) = (self.dims.n_tokens, self.dims.vocab);
        let mut loss = 0.0;
        for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
            let row = row.as_slice().expect("standard layout");
            for (i, block) in row.chunks_exact(v).enumerate() {
                let max = block.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
                let sum: f64 = block.iter().map(|x| (x.f64() - max).exp()).sum();
                let target = batch.x1[b * n + i] as usize;
                loss += max + sum.ln() - block[target].f64();
            }
        }
        Ok(loss / (batch.len() * n) as f64)
    }

    /// Pre-activation values of every hidden layer for a batch; used to keep
    /// finite-difference checks away from ReLU kinks.
    pub fn hidden_preactivations(&self, batch: &Batch) -> Vec<T> {
        let layout = self.dims.layout();
        let mut out = Vec::new();
        let mut a = self.input(&batch.s, &batch.xs);
        for (l, slot) in layout.iter().enumerate() {
            let mut z = Array2::<T>::zeros((a.nrows(), slot.fan_out));
            z.assign(&self.bias(slot).broadcast((a.nrows(), slot.fan_out)).unwrap());
            general_mat_mul(T::one(), &a, &self.weight(slot), T::one(), &mut z);
            if l + 1 < layout.len() {
                out.extend(z.iter().copied());
                z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            a = z;
        }
        out
    }
}
