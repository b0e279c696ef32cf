//! Explicit couplings between draft samples and data samples.
//!
//! A coupling is stored as a list of `(src, dst)` pairs. Refinement pairs each
//! draft with its `k` nearest data samples; the injection remedy adds
//! `k_inject` uniformly random data samples per draft so the dst marginal
//! stays close to the data distribution.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dequantize_token, write_row, Dataset, GridSpec};
use crate::io;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedDataset {
    spec: GridSpec,
    src: Vec<u32>,
    dst: Vec<u32>,
}

impl PairedDataset {
    pub fn new(spec: GridSpec, src: Vec<u32>, dst: Vec<u32>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::DimensionMismatch(
                "src and dst token buffers differ in length".into(),
            ));
        }
        // reuse the dataset validation for both sides
        let src = Dataset::new(spec, src)?.tokens().to_vec();
        let dst = Dataset::new(spec, dst)?.tokens().to_vec();
        Ok(Self { spec, src, dst })
    }

    pub fn from_pairs<'a, I>(spec: GridSpec, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
    {
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for (a, b) in pairs {
            spec.check(a)?;
            spec.check(b)?;
            src.extend_from_slice(a);
            dst.extend_from_slice(b);
        }
        Self::new(spec, src, dst)
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.src.len() / self.spec.n_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self, i: usize) -> &[u32] {
        let n = self.spec.n_tokens;
        &self.src[i * n..(i + 1) * n]
    }

    pub fn dst(&self, i: usize) -> &[u32] {
        let n = self.spec.n_tokens;
        &self.dst[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], &[u32])> + '_ {
        let n = self.spec.n_tokens;
        self.src.chunks_exact(n).zip(self.dst.chunks_exact(n))
    }

    pub fn srcs(&self) -> Dataset {
        Dataset::new(self.spec, self.src.clone()).expect("validated on construction")
    }

    pub fn dsts(&self) -> Dataset {
        Dataset::new(self.spec, self.dst.clone()).expect("validated on construction")
    }

    pub fn to_csv(&self) -> String {
        let n = self.spec.n_tokens;
        let mut header: Vec<String> = (0..n).map(|i| format!("src{i}")).collect();
        header.extend((0..n).map(|i| format!("dst{i}")));
        let mut out = header.join(",");
        out.push('\n');
        let mut row = Vec::with_capacity(2 * n);
        for (a, b) in self.iter() {
            row.clear();
            row.extend_from_slice(a);
            row.extend_from_slice(b);
            write_row(&mut out, &row);
        }
        out
    }
}

pub fn save_pairs(pairs: &PairedDataset, path: &Path) -> Result<()> {
    io::write_atomic(path, pairs.to_csv().as_bytes())
}

/// Loads the `src0..src{N-1},dst0..dst{N-1}` CSV format and validates every
/// token against `vocab`.
pub fn load_pairs(path: &Path, vocab: u32) -> Result<PairedDataset> {
    let (columns, values, rows) = io::read_int_csv(path)?;
    let header_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    if columns.len() % 2 != 0 || columns.is_empty() {
        return Err(header_err("expected src*/dst* column pairs".into()));
    }
    let n = columns.len() / 2;
    let mut expected: Vec<String> = (0..n).map(|i| format!("src{i}")).collect();
    expected.extend((0..n).map(|i| format!("dst{i}")));
    if columns != expected {
        return Err(header_err(format!("expected header {}", expected.join(","))));
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let spec = GridSpec::new(n, vocab)?;
    let mut src = Vec::with_capacity(rows * n);
    let mut dst = Vec::with_capacity(rows * n);
    for (r, row) in values.chunks_exact(2 * n).enumerate() {
        if let Some(&t) = row.iter().find(|&&t| t >= vocab) {
            return Err(Error::Validation(format!(
                "{}: row {} (line {}): token {t} out of range [0, {vocab})",
                path.display(),
                r + 1,
                r + 2
            )));
        }
        src.extend_from_slice(&row[..n]);
        dst.extend_from_slice(&row[n..]);
    }
    PairedDataset::new(spec, src, dst)
}

/// `n` independent pairs of a uniformly random source sample and a uniformly
/// random data sample.
pub fn independent_pairs(
    srcs: &Dataset,
    data: &Dataset,
    n: usize,
    rng: &RngStream,
) -> Result<PairedDataset> {
    srcs.spec().ensure_same(&data.spec())?;
    if n == 0 {
        return Err(Error::invalid("independent_pairs: n must be > 0"));
    }
    let spec = srcs.spec();
    let mut src = Vec::with_capacity(n * spec.n_tokens);
    let mut dst = Vec::with_capacity(n * spec.n_tokens);
    for i in 0..n {
        let mut r = rng.child("independent", i as u64);
        src.extend_from_slice(srcs.sample(r.index_below(srcs.len())));
        dst.extend_from_slice(data.sample(r.index_below(data.len())));
    }
    PairedDataset::new(spec, src, dst)
}

/// Data samples in dequantized unit coordinates, row-major.
struct UnitCoords {
    n_tokens: usize,
    coords: Vec<f64>,
}

impl UnitCoords {
    fn of(data: &Dataset) -> Self {
        let vocab = data.spec().vocab;
        Self {
            n_tokens: data.spec().n_tokens,
            coords: data.tokens().iter().map(|&t| dequantize_token(t, vocab)).collect(),
        }
    }

    /// Exhaustive scan; ties keep the lower index first.
    fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        // sorted vec as a bounded heap; k is small
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (idx, row) in self.coords.chunks_exact(self.n_tokens).enumerate() {
            let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, idx));
            best.truncate(k);
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

fn check_k(k: usize, data: &Dataset) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("knn: k must be >= 1"));
    }
    if k > data.len() {
        return Err(Error::invalid(format!(
            "knn: k={k} exceeds dataset size {}",
            data.len()
        )));
    }
    Ok(())
}

/// Indices of the `k` data samples closest to `draft` in dequantized unit
/// coordinates, nearest first, ties broken by lower index.
pub fn knn_indices(draft: &[u32], data: &Dataset, k: usize) -> Result<Vec<usize>> {
    let spec = data.spec();
    spec.check(draft)?;
    check_k(k, data)?;
    let q: Vec<f64> = draft.iter().map(|&t| dequantize_token(t, spec.vocab)).collect();
    Ok(UnitCoords::of(data).nearest(&q, k))
}

/// The `k` nearest data samples to `draft`, nearest first.
pub fn knn(draft: &[u32], data: &Dataset, k: usize) -> Result<Vec<Vec<u32>>> {
    Ok(knn_indices(draft, data, k)?
        .into_iter()
        .map(|i| data.sample(i).to_vec())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    /// `k_inject` random data partners per draft.
    Independent,
    /// `k` nearest neighbors per draft.
    Knn,
    /// `k` nearest neighbors plus `k_inject` random data partners per draft.
    KnnInjected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    pub k: usize,
    pub k_inject: usize,
}

impl CouplingSpec {
    pub fn knn_injected(k: usize, k_inject: usize) -> Self {
        Self {
            kind: CouplingKind::KnnInjected,
            k,
            k_inject,
        }
    }

    /// Neighbor and injected partner counts per draft after validation.
    fn per_draft(&self) -> Result<(usize, usize)> {
        let (k, inj) = match self.kind {
            CouplingKind::Independent => (0, self.k_inject),
            CouplingKind::Knn => (self.k, 0),
            CouplingKind::KnnInjected => (self.k, self.k_inject),
        };
        if self.kind != CouplingKind::Independent && k == 0 {
            return Err(Error::invalid("coupling: k must be >= 1 for knn kinds"));
        }
        if k + inj == 0 {
            return Err(Error::invalid("coupling: no partners per draft"));
        }
        Ok((k, inj))
    }

    pub fn pairs_per_draft(&self) -> Result<usize> {
        self.per_draft().map(|(k, i)| k + i)
    }
}

/// Builds the refinement coupling. For draft `d` the output holds, in order,
/// its `k` nearest neighbors followed by `k_inject` random data samples, so
/// pair `j` of draft `d` sits at index `d * (k + k_inject) + j`.
pub fn build_coupling(
    drafts: &Dataset,
    data: &Dataset,
    spec: CouplingSpec,
    rng: &RngStream,
) -> Result<PairedDataset> {
    drafts.spec().ensure_same(&data.spec())?;
    let (k, inj) = spec.per_draft()?;
    if k > 0 {
        check_k(k, data)?;
    }
    let vocab = data.spec().vocab;
    // Drafts live on a finite grid and repeat often; search each distinct
    // draft once.
    let mut distinct: Vec<&[u32]> = drafts.iter().collect();
    distinct.sort_unstable();
    distinct.dedup();
    let neighbors: Vec<Vec<usize>> = if k > 0 {
        let index = UnitCoords::of(data);
        distinct
            .par_iter()
            .map(|d| {
                let q: Vec<f64> = d.iter().map(|&t| dequantize_token(t, vocab)).collect();
                index.nearest(&q, k)
            })
            .collect()
    } else {
        vec![Vec::new(); distinct.len()]
    };
    let per_draft: Vec<Vec<usize>> = (0..drafts.len())
        .map(|d| {
            let slot = distinct
                .binary_search(&drafts.sample(d))
                .expect("every draft is in the distinct set");
            let mut partners = neighbors[slot].clone();
            let mut r = rng.child("inject", d as u64);
            partners.extend((0..inj).map(|_| r.index_below(data.len())));
            partners
        })
        .collect();
    let g = drafts.spec();
    let total = drafts.len() * (k + inj);
    let mut src = Vec::with_capacity(total * g.n_tokens);
    let mut dst = Vec::with_capacity(total * g.n_tokens);
    for (d, partners) in per_draft.into_iter().enumerate() {
        for p in partners {
            src.extend_from_slice(drafts.sample(d));
            dst.extend_from_slice(data.sample(p));
        }
    }
    PairedDataset::new(g, src, dst)
}
