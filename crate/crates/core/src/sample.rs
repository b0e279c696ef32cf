//! Euler-discretized CTMC generation from `t0` to 1.
//!
//! Global time advances as `t = t0, t0 + h, ...`. Every step evaluates the
//! posterior once at the local time `s` of the current global time; all but
//! the last step assemble a generator row per token and take an Euler step,
//! and the last step draws each token directly from the posterior.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dataset, GridSpec};
use crate::io;
use crate::net::{ModelParams, Scalar};
use crate::path::{to_global_rate, KappaSchedule, RateVector, WarmStartClock, CLOCK_EPS};
use crate::rng::RngStream;

/// Samples per batched posterior evaluation.
pub const CHUNK: usize = 256;

/// Redraws of an Euler step that lands on a state the model rejects.
pub const MAX_REDRAWS: usize = 64;

/// Source of per-token posteriors over the target token.
pub trait PosteriorModel: Sync {
    fn spec(&self) -> GridSpec;

    /// Posteriors for a batch of states at local time `s`, flattened as
    /// `batch x n_tokens x vocab`.
    fn posterior(&self, s: f64, xs: &[u32]) -> Result<Vec<f64>>;

    /// Whether `x` can occur at local time `s`.
    fn admissible(&self, _s: f64, _x: &[u32]) -> bool {
        true
    }
}

impl<T: Scalar> PosteriorModel for ModelParams<T> {
    fn spec(&self) -> GridSpec {
        self.dims().spec()
    }

    fn posterior(&self, s: f64, xs: &[u32]) -> Result<Vec<f64>> {
        self.posterior_batch(s, xs)
    }
}

/// `ceil((1 - t0) / h)`, with a small tolerance so that exact multiples are
/// not pushed up by rounding.
pub fn nfe(t0: f64, h: f64) -> Result<usize> {
    check_step(t0, h)?;
    Ok(((1.0 - t0) / h - 1e-9).ceil().max(1.0) as usize)
}

fn check_step(t0: f64, h: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t0) {
        return Err(Error::invalid(format!("t0={t0} outside [0, 1)")));
    }
    if !(h > 0.0 && h <= 1.0 - t0 + 1e-9) {
        return Err(Error::invalid(format!("step h={h} outside (0, 1 - t0]")));
    }
    Ok(())
}

/// `coef(s) * (posterior - delta_{x_t})` per token.
pub fn assemble_rate(posterior: &[f64], x_t: &[u32], s: f64, schedule: KappaSchedule) -> Result<RateVector> {
    let n = x_t.len();
    if n == 0 || posterior.len() % n != 0 {
        return Err(Error::DimensionMismatch(format!(
            "posterior of {} values for {n} tokens",
            posterior.len()
        )));
    }
    let v = posterior.len() / n;
    let coef = schedule.rate_coef(s)?;
    let mut rate = RateVector::zeros(n, v);
    for (i, (&x, post)) in x_t.iter().zip(posterior.chunks_exact(v)).enumerate() {
        let x = x as usize;
        if x >= v {
            return Err(Error::DimensionMismatch(format!("token {x} outside vocab {v}")));
        }
        let total: f64 = post.iter().sum();
        if (total - 1.0).abs() > 1e-6 || post.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Validation(format!(
                "posterior row {i} is not a distribution (sum {total})"
            )));
        }
        let row = rate.row_mut(i);
        let mut off = 0.0;
        for (y, (r, &p)) in row.iter_mut().zip(post).enumerate() {
            if y != x {
                *r = coef * p;
                off += *r;
            }
        }
        row[x] = -off;
    }
    Ok(rate)
}

/// One Euler step of the CTMC kernel `delta_{x_t} + h_eff * rate`, one
/// uniform per token. Off-state mass above 1 is scaled down to 1.
pub fn euler_step(x_t: &[u32], rate: &RateVector, h_eff: f64, rng: &mut RngStream) -> Result<Vec<u32>> {
    if !(h_eff > 0.0) {
        return Err(Error::invalid(format!("h_eff={h_eff} must be > 0")));
    }
    if rate.n_tokens() != x_t.len() {
        return Err(Error::DimensionMismatch(format!(
            "rate has {} rows for {} tokens",
            rate.n_tokens(),
            x_t.len()
        )));
    }
    let mut next = Vec::with_capacity(x_t.len());
    for (i, &x) in x_t.iter().enumerate() {
        let row = rate.row(i);
        let off: f64 = row
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != x as usize)
            .map(|(_, r)| r.max(0.0))
            .sum();
        let scale = h_eff / (h_eff * off).max(1.0);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut to = x;
        for (y, &r) in row.iter().enumerate() {
            if y == x as usize {
                continue;
            }
            acc += scale * r.max(0.0);
            if u < acc {
                to = y as u32;
                break;
            }
        }
        next.push(to);
    }
    Ok(next)
}

/// Draws each token independently from its posterior row.
pub fn draw_from_posterior(posterior: &[f64], vocab: usize, rng: &mut RngStream) -> Vec<u32> {
    posterior
        .chunks_exact(vocab)
        .map(|row| {
            let u = rng.uniform();
            let mut acc = 0.0;
            for (y, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return y as u32;
                }
            }
            // rounding left u above the cumulative sum: take the last
            // token with positive mass
            row.iter().rposition(|&p| p > 0.0).unwrap_or(vocab - 1) as u32
        })
        .collect()
}

/// Clock in which Euler steps are taken. Both give the same jump
/// probabilities: global rates with step `h`, or local rates with step
/// `h / (1 - t0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stepping {
    #[default]
    Global,
    Local,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub samples: Dataset,
    pub nfe: usize,
    /// Total generation time divided by the number of samples.
    pub wall_seconds: f64,
}

/// Generates `n` samples; sample `j` starts from `init[j % init.len()]` and
/// uses child stream `("sample", j)` of `rng`.
pub fn generate<M: PosteriorModel>(
    model: &M,
    init: &Dataset,
    t0: f64,
    h: f64,
    n: usize,
    rng: &RngStream,
) -> Result<Generated> {
    generate_with(model, init, t0, h, n, rng, Stepping::Global)
}

pub fn generate_with<M: PosteriorModel>(
    model: &M,
    init: &Dataset,
    t0: f64,
    h: f64,
    n: usize,
    rng: &RngStream,
    stepping: Stepping,
) -> Result<Generated> {
    let spec = model.spec();
    init.spec().ensure_same(&spec)?;
    if n == 0 {
        return Err(Error::invalid("generate: n must be > 0"));
    }
    let steps = nfe(t0, h)?;
    let clock = WarmStartClock::new(t0)?;
    let start = Instant::now();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|a| (a, (a + CHUNK).min(n)))
        .collect();
    let parts = chunks
        .into_par_iter()
        .map(|(a, b)| run_chunk(model, init, &clock, h, steps, a..b, rng, stepping))
        .collect::<Result<Vec<_>>>()?;
    let wall = start.elapsed().as_secs_f64();
    let samples = Dataset::new(spec, parts.concat())?;
    Ok(Generated {
        samples,
        nfe: steps,
        wall_seconds: wall / n as f64,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_chunk<M: PosteriorModel>(
    model: &M,
    init: &Dataset,
    clock: &WarmStartClock,
    h: f64,
    steps: usize,
    range: std::ops::Range<usize>,
    rng: &RngStream,
    stepping: Stepping,
) -> Result<Vec<u32>> {
    let spec = model.spec();
    let (n_tok, v) = (spec.n_tokens, spec.vocab as usize);
    let schedule = KappaSchedule::Linear;
    let mut rngs: Vec<RngStream> = range.clone().map(|j| rng.child("sample", j as u64)).collect();
    let mut xs: Vec<u32> = Vec::with_capacity(range.len() * n_tok);
    for j in range.clone() {
        xs.extend_from_slice(init.sample(j % init.len()));
    }
    let t0 = clock.t0();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let s = clock.local_time(t);
        let post = model.posterior(s, &xs)?;
        let last = k + 1 == steps || s >= 1.0 - CLOCK_EPS;
        for (b, r) in rngs.iter_mut().enumerate() {
            let p = &post[b * n_tok * v..(b + 1) * n_tok * v];
            let x = &mut xs[b * n_tok..(b + 1) * n_tok];
            if last {
                x.copy_from_slice(&draw_from_posterior(p, v, r));
                continue;
            }
            let local = assemble_rate(p, x, s, schedule)?;
            let (rate, h_eff) = match stepping {
                Stepping::Global => (to_global_rate(local, clock), h),
                Stepping::Local => (local, h / (1.0 - t0)),
            };
            let s_next = clock.local_time(t + h);
            let mut next = None;
            for _ in 0..MAX_REDRAWS {
                let cand = euler_step(x, &rate, h_eff, r)?;
                if model.admissible(s_next, &cand) {
                    next = Some(cand);
                    break;
                }
            }
            if let Some(next) = next {
                x.copy_from_slice(&next);
            }
        }
        if last {
            break;
        }
    }
    Ok(xs)
}

/// Sidecar written next to generated samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub t0: f64,
    pub h: f64,
    pub nfe: usize,
    pub n: usize,
    pub wall_seconds: f64,
    pub seed: u64,
    pub checkpoint: Option<String>,
}

pub fn write_sidecar(path: &Path, meta: &SampleMeta) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(meta)?;
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)
}
