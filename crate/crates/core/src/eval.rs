//! Sample-quality metrics, the exact posterior of an explicit coupling, and
//! the start-time selection rule.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::PairedDataset;
use crate::error::{Error, Result};
use crate::grid::{Dataset, GridSpec};
use crate::io;
use crate::path::KappaSchedule;
use crate::sample::{generate, Generated, PosteriorModel};
use crate::rng::RngStream;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Counts over the `vocab x vocab` cells of a two-token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram2D {
    vocab: usize,
    counts: Vec<u64>,
    total: u64,
}

impl Histogram2D {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let spec = data.spec();
        if spec.n_tokens != 2 {
            return Err(Error::invalid(format!(
                "2D histogram needs 2 tokens per sample, got {}",
                spec.n_tokens
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("histogram of an empty dataset"));
        }
        let v = spec.vocab as usize;
        let mut counts = vec![0u64; v * v];
        for x in data.iter() {
            counts[x[0] as usize * v + x[1] as usize] += 1;
        }
        Ok(Self {
            vocab: v,
            counts,
            total: data.len() as u64,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `(count / total + eps) / (1 + V^2 eps)` per cell.
    pub fn smoothed(&self, eps: f64) -> Vec<f64> {
        let z = 1.0 + (self.vocab * self.vocab) as f64 * eps;
        let n = self.total as f64;
        self.counts.iter().map(|&c| (c as f64 / n + eps) / z).collect()
    }
}

/// `KL(p||q) + KL(q||p)` of two strictly positive distributions.
pub fn skl_probs(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

/// Symmetric KL between the smoothed 2D histograms of two datasets.
pub fn skl(a: &Dataset, b: &Dataset, eps: f64) -> Result<f64> {
    a.spec().ensure_same(&b.spec())?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("smoothing eps={eps} must be > 0")));
    }
    let p = Histogram2D::from_dataset(a)?.smoothed(eps);
    let q = Histogram2D::from_dataset(b)?.smoothed(eps);
    Ok(skl_probs(&p, &q))
}

/// Empirical distribution over all `vocab^n_tokens` joint states, indexed
/// with the first token most significant.
pub fn joint_distribution(data: &Dataset) -> Result<Vec<f64>> {
    let spec = data.spec();
    let size = joint_size(spec)?;
    let mut p = vec![0.0; size];
    for x in data.iter() {
        p[joint_index(x, spec.vocab)] += 1.0;
    }
    let n = data.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

fn joint_size(spec: GridSpec) -> Result<usize> {
    (spec.vocab as usize)
        .checked_pow(spec.n_tokens as u32)
        .filter(|&s| s <= 1 << 24)
        .ok_or_else(|| Error::invalid("joint state space too large to enumerate"))
}

pub fn joint_index(x: &[u32], vocab: u32) -> usize {
    x.iter().fold(0, |acc, &t| acc * vocab as usize + t as usize)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Likelihood of `x_s` under the pinned marginal of one pair.
fn pair_weight(x_s: &[u32], src: &[u32], dst: &[u32], k: f64) -> f64 {
    let mut w = 1.0;
    for ((&x, &a), &b) in x_s.iter().zip(src).zip(dst) {
        let mut f = 0.0;
        if x == a {
            f += 1.0 - k;
        }
        if x == b {
            f += k;
        }
        w *= f;
        if w == 0.0 {
            break;
        }
    }
    w
}

/// Bayes posterior of each target token given `x_s`, averaging the pairs'
/// target tokens with weights proportional to their pinned-marginal
/// likelihood of `x_s`. Returns `n_tokens x vocab` values.
pub fn exact_posterior(s: f64, x_s: &[u32], pairs: &PairedDataset, schedule: KappaSchedule) -> Result<Vec<f64>> {
    let spec = pairs.spec();
    spec.check(x_s)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("local time {s} outside [0, 1]")));
    }
    let k = schedule.kappa(s);
    let v = spec.vocab as usize;
    let mut post = vec![0.0; spec.n_tokens * v];
    let mut total = 0.0;
    for (src, dst) in pairs.iter() {
        let w = pair_weight(x_s, src, dst, k);
        if w > 0.0 {
            total += w;
            for (i, &d) in dst.iter().enumerate() {
                post[i * v + d as usize] += w;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::UnreachableState {
            state: x_s.to_vec(),
            s,
        });
    }
    post.iter_mut().for_each(|p| *p /= total);
    Ok(post)
}

/// The exact posterior of an explicit coupling as a generation model.
/// Euler steps that land on states with zero likelihood under every pair
/// are redrawn.
#[derive(Clone, Debug)]
pub struct ExactOracle {
    pub pairs: PairedDataset,
    pub schedule: KappaSchedule,
}

impl ExactOracle {
    pub fn new(pairs: PairedDataset) -> Self {
        Self {
            pairs,
            schedule: KappaSchedule::Linear,
        }
    }
}

impl PosteriorModel for ExactOracle {
    fn spec(&self) -> GridSpec {
        self.pairs.spec()
    }

    fn posterior(&self, s: f64, xs: &[u32]) -> Result<Vec<f64>> {
        let n = self.pairs.spec().n_tokens;
        let mut out = Vec::with_capacity(xs.len() * self.pairs.spec().vocab as usize);
        for x in xs.chunks_exact(n) {
            out.extend(exact_posterior(s, x, &self.pairs, self.schedule)?);
        }
        Ok(out)
    }

    fn admissible(&self, s: f64, x: &[u32]) -> bool {
        let k = self.schedule.kappa(s);
        self.pairs.iter().any(|(a, b)| pair_weight(x, a, b, k) > 0.0)
    }
}

/// Generation with the exact posterior of `pairs` in place of a network.
pub fn oracle_generate(
    pairs: &PairedDataset,
    init: &Dataset,
    t0: f64,
    h: f64,
    n: usize,
    rng: &RngStream,
) -> Result<Generated> {
    generate(&ExactOracle::new(pairs.clone()), init, t0, h, n, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t0: f64,
    pub skl: f64,
    pub nfe: usize,
    pub wall_seconds: f64,
    pub qualifies: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub baseline_skl: f64,
    pub rows: Vec<SweepRow>,
    /// Largest `t0` whose SKL does not exceed the baseline.
    pub selected: Option<f64>,
}

impl fmt::Display for SweepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.selected {
            Some(t0) => write!(f, "selected t0 = {t0}"),
            None => write!(f, "no t0 qualifies"),
        }
    }
}

/// Evaluates each candidate (sorted descending) and picks the largest `t0`
/// with SKL at most `baseline_skl`. `eval` returns `(skl, nfe, wall_seconds)`.
pub fn t0_sweep<F>(candidates: &[f64], mut eval: F, baseline_skl: f64) -> Result<SweepOutcome>
where
    F: FnMut(f64) -> Result<(f64, usize, f64)>,
{
    if candidates.is_empty() {
        return Err(Error::invalid("empty t0 grid"));
    }
    if candidates.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::invalid("t0 candidates must be strictly descending"));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &t0 in candidates {
        let (skl, nfe, wall_seconds) = eval(t0)?;
        rows.push(SweepRow {
            t0,
            skl,
            nfe,
            wall_seconds,
            qualifies: skl <= baseline_skl,
        });
    }
    let selected = rows.iter().find(|r| r.qualifies).map(|r| r.t0);
    Ok(SweepOutcome {
        baseline_skl,
        rows,
        selected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub t0: f64,
    pub nfe: usize,
    pub skl: f64,
    pub wall_seconds: f64,
    pub eps: f64,
    pub n_eval: usize,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "run_id,t0,nfe,skl,wall_seconds,eps,n_eval,seed";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run_id, r.t0, r.nfe, r.skl, r.wall_seconds, r.eps, r.n_eval, r.seed
        ));
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    io::write_atomic(path, metrics_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::two_moons_dataset;

    fn spec4() -> GridSpec {
        GridSpec::new(2, 4).unwrap()
    }

    #[test]
    fn skl_toy_values() {
        let p = [0.75, 0.25];
        let q = [0.25, 0.75];
        assert!((skl_probs(&p, &q) - 3f64.ln()).abs() < 1e-15);
        assert!((3f64.ln() - 1.0986).abs() < 1e-4);

        let spec = GridSpec::two_moons();
        let a = Dataset::new(spec, vec![3, 4]).unwrap();
        let b = Dataset::new(spec, vec![100, 7]).unwrap();
        let eps: f64 = 1e-6;
        let z = 1.0 + 128.0 * 128.0 * eps;
        let expect = 2.0 / z * ((1.0 + eps) / eps).ln();
        let got = skl(&a, &b, eps).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect, "{got} vs {expect}");
    }

    #[test]
    fn skl_symmetry_and_identity() {
        let spec = GridSpec::two_moons();
        let a = two_moons_dataset(5000, 0.04, spec, &RngStream::new(1, "a", 0)).unwrap();
        let b = two_moons_dataset(5000, 0.04, spec, &RngStream::new(2, "b", 0)).unwrap();
        assert_eq!(skl(&a, &a, 1e-6).unwrap(), 0.0);
        assert_eq!(skl(&a, &b, 1e-6).unwrap(), skl(&b, &a, 1e-6).unwrap());
        assert!(skl(&a, &b, 1e-6).unwrap() > 0.0);
        assert!(skl(&a, &b, 0.0).is_err());
        let three = Dataset::new(GridSpec::new(3, 4).unwrap(), vec![0, 1, 2]).unwrap();
        assert!(Histogram2D::from_dataset(&three).is_err());
    }

    #[test]
    fn smoothed_histogram_normalized() {
        let d = Dataset::new(GridSpec::two_moons(), vec![1, 2, 1, 2, 5, 9]).unwrap();
        let p = Histogram2D::from_dataset(&d).unwrap().smoothed(1e-6);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn pairs3() -> PairedDataset {
        PairedDataset::from_pairs(
            spec4(),
            [
                (&[0u32, 1][..], &[2u32, 3][..]),
                (&[1, 1], &[3, 3]),
                (&[0, 2], &[0, 0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn exact_posterior_single_pair_and_s0() {
        let single = PairedDataset::from_pairs(spec4(), [(&[0u32, 1][..], &[2u32, 3][..])]).unwrap();
        for (s, x) in [(0.3, [0u32, 3u32]), (0.7, [2, 1]), (1.0, [2, 3])] {
            let p = exact_posterior(s, &x, &single, KappaSchedule::Linear).unwrap();
            assert_eq!(p, vec![0., 0., 1., 0., 0., 0., 0., 1.]);
        }
        // at s = 0 only the pair whose source equals x_s carries weight
        let p = exact_posterior(0.0, &[1, 1], &pairs3(), KappaSchedule::Linear).unwrap();
        assert_eq!(p, vec![0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn exact_posterior_errors_and_rows() {
        let err = exact_posterior(0.0, &[3, 3], &pairs3(), KappaSchedule::Linear);
        assert!(matches!(err, Err(Error::UnreachableState { .. })));
        let p = exact_posterior(0.5, &[0, 3], &pairs3(), KappaSchedule::Linear).unwrap();
        for row in p.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let oracle = ExactOracle::new(pairs3());
        assert!(!oracle.admissible(0.0, &[3, 3]));
        assert!(oracle.admissible(0.5, &[0, 3]));
    }

    #[test]
    fn oracle_single_pair_ends_at_target() {
        let single = PairedDataset::from_pairs(spec4(), [(&[0u32, 1][..], &[2u32, 3][..])]).unwrap();
        let init = Dataset::new(spec4(), vec![0, 1]).unwrap();
        let out = oracle_generate(&single, &init, 0.0, 0.05, 500, &RngStream::new(0, "o", 0)).unwrap();
        assert!(out.samples.iter().all(|x| x == [2, 3]));
    }

    #[test]
    fn sweep_selection_rules() {
        let table = |t0: f64| Ok((t0 - 0.7, (20.0 * (1.0 - t0)).round() as usize, 0.0));
        let out = t0_sweep(&[0.95, 0.9, 0.8], table, f64::INFINITY).unwrap();
        assert_eq!(out.selected, Some(0.95));
        let out = t0_sweep(&[0.95, 0.9, 0.8], table, 0.0).unwrap();
        assert_eq!(out.selected, None);
        assert_eq!(out.to_string(), "no t0 qualifies");
        let out = t0_sweep(&[0.95, 0.9, 0.8], table, 0.22).unwrap();
        assert_eq!(out.selected, Some(0.9));
        assert_eq!(out.rows.iter().map(|r| r.qualifies).collect::<Vec<_>>(), [false, true, true]);
        assert!(t0_sweep(&[], table, 1.0).is_err());
        assert!(t0_sweep(&[0.5, 0.8], table, 1.0).is_err());
    }

    #[test]
    fn joint_distribution_and_tv() {
        let d = Dataset::new(spec4(), vec![0, 1, 0, 1, 3, 3, 2, 0]).unwrap();
        let p = joint_distribution(&d).unwrap();
        assert_eq!(p[1], 0.5);
        assert_eq!(p[15], 0.25);
        assert_eq!(p[8], 0.25);
        assert_eq!(total_variation(&p, &p), 0.0);
    }

    #[test]
    fn metrics_layout() {
        let row = MetricsRow {
            run_id: "r".into(),
            t0: 0.8,
            nfe: 4,
            skl: 0.5,
            wall_seconds: 1e-4,
            eps: 1e-6,
            n_eval: 100,
            seed: 7,
        };
        assert_eq!(
            metrics_csv(&[row]),
            "run_id,t0,nfe,skl,wall_seconds,eps,n_eval,seed\nr,0.8,4,0.5,0.0001,0.000001,100,7\n"
        );
    }
}
