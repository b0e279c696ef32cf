//! Draft-sample sources for warm starts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::rng::RngStream;

/// Corruption levels of the three contrived draft tiers.
pub const PRETTY_GOOD: f64 = 0.2;
pub const FAIR: f64 = 0.3;
pub const POOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftModel {
    /// A random data sample whose tokens are each replaced, with probability
    /// `p_noise`, by a uniform token. `p_noise = 1` is pure uniform noise.
    CorruptedData { p_noise: f64 },
    /// Externally generated drafts in the dataset CSV format.
    File(PathBuf),
}

impl DraftModel {
    pub fn corrupted(p_noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_noise) {
            return Err(Error::invalid(format!("p_noise={p_noise} outside [0, 1]")));
        }
        Ok(DraftModel::CorruptedData { p_noise })
    }

    pub fn uniform_noise() -> Self {
        DraftModel::CorruptedData { p_noise: 1.0 }
    }
}

/// Draws `n` drafts. Draft `i` uses child stream `i` of `rng`. File drafts
/// are returned as stored (all rows) when `n` is 0, otherwise the first `n`
/// rows cycled as needed.
pub fn sample_draft(model: &DraftModel, data: &Dataset, n: usize, rng: &RngStream) -> Result<Dataset> {
    match model {
        DraftModel::CorruptedData { p_noise } => {
            let p = *p_noise;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("p_noise={p} outside [0, 1]")));
            }
            if n == 0 {
                return Err(Error::invalid("sample_draft: n must be > 0"));
            }
            let spec = data.spec();
            let mut tokens = Vec::with_capacity(n * spec.n_tokens);
            for i in 0..n {
                let mut r = rng.child("draft", i as u64);
                let base = data.sample(r.index_below(data.len()));
                for &t in base {
                    // fixed two draws per token keeps streams aligned across p
                    let corrupt = r.uniform() < p;
                    let replacement = r.below(spec.vocab as u64) as u32;
                    tokens.push(if corrupt { replacement } else { t });
                }
            }
            Dataset::new(spec, tokens)
        }
        DraftModel::File(path) => {
            let file = Dataset::read_csv(path, data.spec().vocab)?;
            file.spec().ensure_same(&data.spec())?;
            if n == 0 || n == file.len() {
                return Ok(file);
            }
            let rows: Vec<&[u32]> = (0..n).map(|i| file.sample(i % file.len())).collect();
            Dataset::from_samples(file.spec(), rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{two_moons_dataset, GridSpec};

    fn data() -> Dataset {
        two_moons_dataset(2000, 0.04, GridSpec::two_moons(), &RngStream::new(3, "d", 0)).unwrap()
    }

    #[test]
    fn zero_noise_returns_data_rows() {
        let d = data();
        let drafts = sample_draft(&DraftModel::corrupted(0.0).unwrap(), &d, 500, &RngStream::new(1, "x", 0)).unwrap();
        let rows: std::collections::HashSet<&[u32]> = d.iter().collect();
        assert!(drafts.iter().all(|r| rows.contains(r)));
    }

    #[test]
    fn full_noise_is_uniform_chi_square() {
        let d = data();
        let n = 100_000;
        let drafts = sample_draft(&DraftModel::uniform_noise(), &d, n, &RngStream::new(2, "x", 0)).unwrap();
        for pos in 0..2 {
            let mut counts = vec![0f64; 128];
            for r in drafts.iter() {
                counts[r[pos] as usize] += 1.0;
            }
            let e = n as f64 / 128.0;
            let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
            // chi-square, 127 dof, upper 0.001 quantile
            assert!(chi2 < 181.993, "pos {pos}: chi2={chi2}");
        }
    }

    #[test]
    fn half_noise_changed_fraction() {
        let d = data();
        let n = 100_000;
        let rng = RngStream::new(5, "x", 0);
        let drafts = sample_draft(&DraftModel::corrupted(0.5).unwrap(), &d, n, &rng).unwrap();
        // recover each draft's base row from the same stream
        let mut changed = 0usize;
        for i in 0..n {
            let mut r = rng.child("draft", i as u64);
            let base = d.sample(r.index_below(d.len()));
            changed += base.iter().zip(drafts.sample(i)).filter(|(a, b)| a != b).count();
        }
        let m = 2.0 * n as f64;
        let p = 0.5 * (1.0 - 1.0 / 128.0);
        let frac = changed as f64 / m;
        let sd = (p * (1.0 - p) / m).sqrt();
        assert!((p - 0.49609).abs() < 1e-5);
        assert!((frac - p).abs() < 4.0 * sd, "frac={frac}");
    }

    #[test]
    fn invalid_inputs() {
        assert!(DraftModel::corrupted(1.5).is_err());
        let d = data();
        let bad = DraftModel::CorruptedData { p_noise: -0.1 };
        assert!(sample_draft(&bad, &d, 3, &RngStream::new(0, "x", 0)).is_err());
        let missing = DraftModel::File("/nonexistent/drafts.csv".into());
        assert!(sample_draft(&missing, &d, 3, &RngStream::new(0, "x", 0)).is_err());
    }

    #[test]
    fn file_drafts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drafts.csv");
        let d = data();
        d.write_csv(&path).unwrap();
        let loaded = sample_draft(&DraftModel::File(path), &d, 0, &RngStream::new(0, "x", 0)).unwrap();
        assert_eq!(loaded, d);
    }
}
