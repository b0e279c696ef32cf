//! Probability paths, conditional generators and the warm-start clock.
//!
//! The path is the two-component mixture per token,
//!
//! ```text
//! P_s(x^i | x_src, x_1) = (1 - kappa(s)) * delta_{x_src^i} + kappa(s) * delta_{x_1^i}
//! ```
//!
//! on the local clock `s in [0, 1]`. The pinned generator that realizes it
//! moves mass from the current token toward `x_1^i` at rate
//! `kappa'(s) / (1 - kappa(s))`.
//!
//! Warm starts live on the global clock `t in [t0, 1]`, with
//! `s = (t - t0) / (1 - t0)`. Rates expressed per unit of local time are
//! converted to global time by the chain-rule factor `ds/dt = 1 / (1 - t0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Rates are undefined at `s >= 1 - CLOCK_EPS`.
pub const CLOCK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaSchedule {
    #[default]
    Linear,
}

impl KappaSchedule {
    pub fn kappa(&self, s: f64) -> f64 {
        match self {
            KappaSchedule::Linear => s.clamp(0.0, 1.0),
        }
    }

    pub fn kappa_dot(&self, _s: f64) -> f64 {
        match self {
            KappaSchedule::Linear => 1.0,
        }
    }

    /// `kappa'(s) / (1 - kappa(s))`, the jump-rate coefficient of the pinned
    /// generator on the local clock.
    pub fn rate_coef(&self, s: f64) -> Result<f64> {
        if s >= 1.0 - CLOCK_EPS {
            return Err(Error::ClockSaturated { s, eps: CLOCK_EPS });
        }
        if !(s >= 0.0) {
            return Err(Error::invalid(format!("local time {s} < 0")));
        }
        Ok(self.kappa_dot(s) / (1.0 - self.kappa(s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmStartClock {
    t0: f64,
}

impl WarmStartClock {
    pub fn new(t0: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t0) {
            return Err(Error::invalid(format!("t0={t0} outside [0, 1)")));
        }
        Ok(Self { t0 })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn local_time(&self, t: f64) -> f64 {
        (t - self.t0) / (1.0 - self.t0)
    }

    pub fn global_time(&self, s: f64) -> f64 {
        self.t0 + s * (1.0 - self.t0)
    }

    /// `ds/dt`.
    pub fn speed(&self) -> f64 {
        1.0 / (1.0 - self.t0)
    }
}

/// One CTMC generator row per token position, stored row-major
/// (`n_tokens x vocab`).
#[derive(Clone, Debug, PartialEq)]
pub struct RateVector {
    vocab: usize,
    rates: Vec<f64>,
}

impl RateVector {
    pub fn zeros(n_tokens: usize, vocab: usize) -> Self {
        Self {
            vocab,
            rates: vec![0.0; n_tokens * vocab],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.rates.len() / self.vocab
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rates[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.rates[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub fn max_abs(&self) -> f64 {
        self.rates.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Checks the generator-row invariants against the current state `x`:
    /// non-positive diagonal, non-negative off-diagonal, rows summing to 0.
    pub fn check(&self, x: &[u32], tol: f64) -> Result<()> {
        if x.len() != self.n_tokens() {
            return Err(Error::DimensionMismatch(format!(
                "rate has {} rows, state has {} tokens",
                self.n_tokens(),
                x.len()
            )));
        }
        for (i, &xi) in x.iter().enumerate() {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if sum.abs() > tol {
                return Err(Error::Validation(format!("row {i} sums to {sum}")));
            }
            for (y, &r) in row.iter().enumerate() {
                let bad = if y as u32 == xi { r > 0.0 } else { r < 0.0 };
                if bad || !r.is_finite() {
                    return Err(Error::Validation(format!("row {i} entry {y} = {r}")));
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for r in &mut self.rates {
            *r *= factor;
        }
    }
}

fn ensure_same_len(a: &[u32], b: &[u32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "sequences of different length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Draws `x_s` from the pinned marginal: each token independently takes the
/// target token with probability `kappa(s)` and the source token otherwise.
pub fn sample_xt(
    s: f64,
    x_src: &[u32],
    x1: &[u32],
    schedule: KappaSchedule,
    rng: &mut RngStream,
) -> Result<Vec<u32>> {
    ensure_same_len(x_src, x1)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("local time {s} outside [0, 1]")));
    }
    let k = schedule.kappa(s);
    Ok(x_src
        .iter()
        .zip(x1)
        .map(|(&a, &b)| if rng.uniform() < k { b } else { a })
        .collect())
}

/// The pinned generator `coef(s) * (delta_{x1^i} - delta_{x_s^i})` per token.
pub fn conditional_rate(
    s: f64,
    x_s: &[u32],
    x1: &[u32],
    vocab: usize,
    schedule: KappaSchedule,
) -> Result<RateVector> {
    ensure_same_len(x_s, x1)?;
    let coef = schedule.rate_coef(s)?;
    let mut rate = RateVector::zeros(x_s.len(), vocab);
    for (i, (&cur, &target)) in x_s.iter().zip(x1).enumerate() {
        if cur != target {
            let row = rate.row_mut(i);
            row[target as usize] = coef;
            row[cur as usize] = -coef;
        }
    }
    Ok(rate)
}

/// Re-expresses a local-clock rate per unit of global time.
pub fn to_global_rate(mut rate_local: RateVector, clock: &WarmStartClock) -> RateVector {
    rate_local.scale(clock.speed());
    rate_local
}
