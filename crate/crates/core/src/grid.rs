//! Token grids, datasets and the two-moons generator.
//!
//! A state is a fixed-length sequence of `n_tokens` categorical tokens, each
//! in `[0, vocab)`. The two-moons experiment uses `n_tokens = 2` and
//! `vocab = 128`, so each state is a cell of a 128x128 grid.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_tokens: usize,
    pub vocab: u32,
}

impl GridSpec {
    pub fn new(n_tokens: usize, vocab: u32) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::invalid("n_tokens must be >= 1"));
        }
        if vocab < 2 {
            return Err(Error::invalid("vocab must be >= 2"));
        }
        Ok(Self { n_tokens, vocab })
    }

    /// The 128x128 grid of the two-moons experiment.
    pub fn two_moons() -> Self {
        Self {
            n_tokens: 2,
            vocab: 128,
        }
    }

    pub fn check(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.n_tokens {
            return Err(Error::DimensionMismatch(format!(
                "sequence has {} tokens, grid expects {}",
                tokens.len(),
                self.n_tokens
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Validation(format!(
                "token {t} out of range [0, {})",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::invalid(format!(
                "grid mismatch: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// A validated token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(spec: &GridSpec, tokens: Vec<u32>) -> Result<Self> {
        spec.check(&tokens)?;
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// A non-empty set of samples on one grid, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    spec: GridSpec,
    tokens: Vec<u32>,
}

impl Dataset {
    pub fn new(spec: GridSpec, tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("dataset must be non-empty"));
        }
        if tokens.len() % spec.n_tokens != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens is not a multiple of n_tokens={}",
                tokens.len(),
                spec.n_tokens
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= spec.vocab) {
            return Err(Error::Validation(format!(
                "token {t} out of range [0, {})",
                spec.vocab
            )));
        }
        Ok(Self { spec, tokens })
    }

    pub fn from_samples<I, S>(spec: GridSpec, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u32]>,
    {
        let mut tokens = Vec::new();
        for s in samples {
            spec.check(s.as_ref())?;
            tokens.extend_from_slice(s.as_ref());
        }
        Self::new(spec, tokens)
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.spec.n_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[u32] {
        let n = self.spec.n_tokens;
        &self.tokens[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.tokens.chunks_exact(self.spec.n_tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Writes the `tok0,...,tok{N-1}` CSV format.
    pub fn to_csv(&self) -> String {
        let n = self.spec.n_tokens;
        let mut out = String::with_capacity(self.tokens.len() * 4 + 32);
        let header: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in self.iter() {
            write_row(&mut out, row);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_csv().as_bytes())
    }

    /// Reads a dataset CSV; `n_tokens` comes from the header and every token
    /// is validated against `vocab`.
    pub fn read_csv(path: &Path, vocab: u32) -> Result<Self> {
        let (columns, values, rows) = io::read_int_csv(path)?;
        let expected: Vec<String> = (0..columns.len()).map(|i| format!("tok{i}")).collect();
        if columns != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header {}", expected.join(",")),
            });
        }
        if rows == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 2,
                msg: "no data rows".into(),
            });
        }
        let spec = GridSpec::new(columns.len(), vocab)?;
        Dataset::new(spec, values).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_row(out: &mut String, row: &[u32]) {
    for (i, t) in row.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{t}");
    }
    out.push('\n');
}

/// Maps a unit-square point to grid cells: `floor(c * vocab)` clamped to
/// `vocab - 1`.
pub fn quantize(point: [f64; 2], spec: &GridSpec) -> TokenSeq {
    let v = spec.vocab;
    let q = |c: f64| -> u32 {
        let cell = (c.clamp(0.0, 1.0) * v as f64).floor() as u32;
        cell.min(v - 1)
    };
    TokenSeq(vec![q(point[0]), q(point[1])])
}

/// Cell centers: token `v` maps to `(v + 0.5) / vocab`.
pub fn dequantize(seq: &[u32], spec: &GridSpec) -> [f64; 2] {
    let v = spec.vocab as f64;
    [(seq[0] as f64 + 0.5) / v, (seq[1] as f64 + 0.5) / v]
}

pub fn dequantize_token(token: u32, vocab: u32) -> f64 {
    (token as f64 + 0.5) / vocab as f64
}

/// Moon layout in unit coordinates: the upper arc is centered at
/// (0.35, 0.55) and opens downward, the lower arc at (0.65, 0.45) opens
/// upward, both with radius 0.3.
pub const UPPER_MOON_CENTER: [f64; 2] = [0.35, 0.55];
pub const LOWER_MOON_CENTER: [f64; 2] = [0.65, 0.45];
pub const MOON_RADIUS: f64 = 0.3;
pub const DEFAULT_MOON_NOISE: f64 = 0.03;

/// Draws an unquantized two-moons point; returns the point and which moon it
/// came from (0 = upper, 1 = lower).
pub fn two_moons_point(noise: &Normal<f64>, rng: &mut RngStream) -> ([f64; 2], usize) {
    let moon = rng.index_below(2);
    let theta = rng.uniform() * PI;
    let (c, s) = (theta.cos(), theta.sin());
    let p = if moon == 0 {
        [
            UPPER_MOON_CENTER[0] + MOON_RADIUS * c,
            UPPER_MOON_CENTER[1] + MOON_RADIUS * s,
        ]
    } else {
        [
            LOWER_MOON_CENTER[0] - MOON_RADIUS * c,
            LOWER_MOON_CENTER[1] - MOON_RADIUS * s,
        ]
    };
    let jitter = [noise.sample(rng), noise.sample(rng)];
    ([p[0] + jitter[0], p[1] + jitter[1]], moon)
}

/// Quantized two-moons samples on a two-token grid. Sample `i` is drawn from
/// its own child stream of `rng`.
pub fn two_moons_dataset(
    n: usize,
    noise_std: f64,
    spec: GridSpec,
    rng: &RngStream,
) -> Result<Dataset> {
    Ok(two_moons_labeled(n, noise_std, spec, rng)?.0)
}

/// Like [`two_moons_dataset`] but also returns the moon label of each sample.
pub fn two_moons_labeled(
    n: usize,
    noise_std: f64,
    spec: GridSpec,
    rng: &RngStream,
) -> Result<(Dataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("two_moons_dataset: n must be > 0"));
    }
    if spec.n_tokens != 2 {
        return Err(Error::invalid(format!(
            "two_moons_dataset: grid must have 2 tokens, got {}",
            spec.n_tokens
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("two_moons_dataset: noise_std must be >= 0"));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut tokens = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.child("two-moons", i as u64);
        let (p, moon) = two_moons_point(&noise, &mut r);
        tokens.extend_from_slice(&quantize(p, &spec));
        labels.push(moon);
    }
    Ok((Dataset::new(spec, tokens)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::two_moons()
    }

    #[test]
    fn quantize_boundaries_and_midpoints() {
        assert_eq!(quantize([0.0, 0.0], &spec()).as_slice(), &[0, 0]);
        assert_eq!(quantize([1.0, 1.0], &spec()).as_slice(), &[127, 127]);
        assert_eq!(quantize([0.5, 0.25], &spec()).as_slice(), &[64, 32]);
    }

    #[test]
    fn dequantize_quantize_is_identity_on_tokens() {
        let s = spec();
        for a in 0..128 {
            for b in [0u32, 5, 64, 127] {
                let back = quantize(dequantize(&[a, b], &s), &s);
                assert_eq!(back.as_slice(), &[a, b]);
            }
        }
    }

    #[test]
    fn round_trip_moves_coordinate_by_at_most_one_cell() {
        let s = spec();
        let mut r = RngStream::new(11, "q", 0);
        for _ in 0..10_000 {
            let p = [r.uniform(), r.uniform()];
            let q = dequantize(&quantize(p, &s), &s);
            assert!((q[0] - p[0]).abs() <= 1.0 / 128.0);
            assert!((q[1] - p[1]).abs() <= 1.0 / 128.0);
        }
    }

    #[test]
    fn grid_spec_rejects_degenerate() {
        assert!(GridSpec::new(0, 4).is_err());
        assert!(GridSpec::new(2, 1).is_err());
        assert!(GridSpec::new(1, 2).is_ok());
    }

    #[test]
    fn zero_noise_points_lie_on_arcs() {
        let s = spec();
        let d = two_moons_dataset(4, 0.0, s, &RngStream::new(5, "moons", 0)).unwrap();
        assert_eq!(d.len(), 4);
        // quantization moves a point by at most half a cell per axis
        let tol = 0.5 * 2f64.sqrt() / 128.0;
        for row in d.iter() {
            let p = dequantize(row, &s);
            let on_upper = {
                let (dx, dy) = (p[0] - UPPER_MOON_CENTER[0], p[1] - UPPER_MOON_CENTER[1]);
                ((dx * dx + dy * dy).sqrt() - MOON_RADIUS).abs() <= tol && dy >= -tol
            };
            let on_lower = {
                let (dx, dy) = (p[0] - LOWER_MOON_CENTER[0], p[1] - LOWER_MOON_CENTER[1]);
                ((dx * dx + dy * dy).sqrt() - MOON_RADIUS).abs() <= tol && dy <= tol
            };
            assert!(on_upper || on_lower, "{row:?} -> {p:?}");
        }
    }

    #[test]
    fn tokens_stay_in_range_under_heavy_noise() {
        let d = two_moons_dataset(1000, 0.5, spec(), &RngStream::new(9, "moons", 0)).unwrap();
        assert!(d.tokens().iter().all(|&t| t < 128));
    }

    #[test]
    fn class_balance_within_binomial_bound() {
        let (_, labels) =
            two_moons_labeled(10_000, 0.05, spec(), &RngStream::new(2, "moons", 0)).unwrap();
        let upper = labels.iter().filter(|&&m| m == 0).count();
        assert!((4800..=5200).contains(&upper), "upper={upper}");
    }

    #[test]
    fn generator_preconditions() {
        let r = RngStream::new(0, "moons", 0);
        assert!(matches!(
            two_moons_dataset(0, 0.1, spec(), &r),
            Err(Error::InvalidArgument(_))
        ));
        let three = GridSpec::new(3, 128).unwrap();
        assert!(matches!(
            two_moons_dataset(10, 0.1, three, &r),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = two_moons_dataset(500, 0.04, spec(), &RngStream::new(1, "m", 0)).unwrap();
        let b = two_moons_dataset(500, 0.04, spec(), &RngStream::new(1, "m", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = two_moons_dataset(50, 0.04, spec(), &RngStream::new(1, "m", 0)).unwrap();
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path, 128).unwrap(), d);

        std::fs::write(&path, "tok0,tok1\n1,2\n3\n").unwrap();
        match Dataset::read_csv(&path, 128) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "tok0,tok1\n1,200\n").unwrap();
        assert!(matches!(
            Dataset::read_csv(&path, 128),
            Err(Error::Validation(_))
        ));
    }
}
