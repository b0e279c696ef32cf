//! Start-time sweeps over draft tiers and the two-moons results table.
//!
//! A sweep trains one vanilla model (uniform-noise sources, `t0 = 0`) and one
//! model per draft tier for every seed. The network reads the local clock
//! and training draws `s ~ U[0, 1)`, so a tier's model does not depend on
//! `t0`; each `t0` of the tier's grid is evaluated with the same model, using
//! the snapshot with the lowest validation SKL at that `t0`. Reported SKL and
//! wall time are medians over seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::coupling::{build_coupling, CouplingSpec};
use crate::drafts::{sample_draft, DraftModel, FAIR, POOR, PRETTY_GOOD};
use crate::error::{Error, Result};
use crate::eval::{metrics_csv, skl, t0_sweep, MetricsRow, SweepOutcome};
use crate::grid::{two_moons_dataset, Dataset, GridSpec};
use crate::io;
use crate::net::{save_checkpoint, CheckpointHeader, ModelParams, CHECKPOINT_FORMAT};
use crate::plot::scatter_svg;
use crate::rng::RngStream;
use crate::sample::generate;
use crate::train::{loss_csv, train, train_vanilla, Snapshot, TrainOutput};

pub const BASELINE: &str = "dfm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub name: String,
    pub p_noise: f64,
    /// Strictly descending start times.
    pub t0_grid: Vec<f64>,
}

impl Tier {
    pub fn new(name: impl Into<String>, p_noise: f64, t0_grid: Vec<f64>) -> Result<Self> {
        DraftModel::corrupted(p_noise)?;
        if t0_grid.is_empty() {
            return Err(Error::invalid("empty t0 grid"));
        }
        if t0_grid.windows(2).any(|w| !(w[0] > w[1])) || t0_grid.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::invalid("t0 grid must be strictly descending within [0, 1)"));
        }
        Ok(Self {
            name: name.into(),
            p_noise,
            t0_grid,
        })
    }
}

/// The three draft tiers and start-time grids of the results table.
pub fn table1_tiers() -> Vec<Tier> {
    vec![
        Tier::new("pretty_good", PRETTY_GOOD, vec![0.95, 0.9, 0.8]).unwrap(),
        Tier::new("fair", FAIR, vec![0.8, 0.5]).unwrap(),
        Tier::new("poor", POOR, vec![0.8, 0.5, 0.35]).unwrap(),
    ]
}

pub fn table1_seeds(seed: u64) -> Vec<u64> {
    vec![seed, seed + 1, seed + 2]
}

/// One line of the summary table: medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tier: String,
    pub p_noise: f64,
    pub t0: f64,
    pub skl: f64,
    pub nfe: usize,
    pub qualifies: bool,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub run_id: String,
    pub t0: f64,
    pub iteration: usize,
    pub validation_skl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub seed: u64,
    pub tier: String,
    pub p_noise: f64,
    /// SKL of the raw start samples against held-out data.
    pub skl: f64,
}

#[derive(Clone, Debug)]
pub struct LossCurve {
    pub seed: u64,
    pub tier: String,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    /// Baseline first, then each tier's grid in order.
    pub rows: Vec<ReportRow>,
    pub outcomes: Vec<(String, SweepOutcome)>,
    pub metrics: Vec<MetricsRow>,
    pub selections: Vec<SelectionRow>,
    pub sources: Vec<SourceRow>,
    pub losses: Vec<LossCurve>,
    /// Final parameters per `(seed, tier)`.
    pub models: Vec<(u64, String, ModelParams<f32>)>,
    /// Evaluation samples of the first seed, one per report row.
    pub samples: Vec<(String, Dataset)>,
    pub reference: Dataset,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct SeedData {
    data: Dataset,
    reference: Dataset,
    validation: Dataset,
}

fn seed_data(config: &RunConfig, seed: u64) -> Result<SeedData> {
    let spec = GridSpec::new(2, config.vocab)?;
    let moons = |n, label| two_moons_dataset(n, config.noise_std, spec, &RngStream::new(seed, label, 0));
    Ok(SeedData {
        data: moons(config.n_data, "data")?,
        reference: moons(config.n_eval, "reference")?,
        validation: moons(config.n_validation, "validation")?,
    })
}

/// Which source a job trains on: `None` is the vanilla baseline.
#[derive(Clone, Copy)]
struct Job {
    seed_index: usize,
    tier: Option<usize>,
}

struct Evaluated {
    t0: f64,
    skl: f64,
    nfe: usize,
    wall_seconds: f64,
    selection: SelectionRow,
    samples: Dataset,
}

struct JobResult {
    job: Job,
    name: String,
    p_noise: f64,
    source_skl: f64,
    out: TrainOutput,
    evals: Vec<Evaluated>,
}

fn run_id(seed: u64, name: &str, t0: f64) -> String {
    format!("seed{seed}-{name}-t{t0}")
}

fn run_job(config: &RunConfig, tiers: &[Tier], seed: u64, sd: &SeedData, job: Job) -> Result<JobResult> {
    let cfg = RunConfig { seed, ..config.clone() };
    // stream index 0 belongs to the baseline, tier i uses i + 1
    let stream = job.tier.map_or(0, |t| t as u64 + 1);
    let (name, p_noise, grid) = match job.tier {
        None => (BASELINE.to_string(), 1.0, vec![0.0]),
        Some(t) => (tiers[t].name.clone(), tiers[t].p_noise, tiers[t].t0_grid.clone()),
    };
    let model = DraftModel::corrupted(p_noise)?;
    log::info!("seed {seed}: training {name}");
    let out = match job.tier {
        None => train_vanilla(&RunConfig { t0: 0.0, ..cfg.clone() }, &sd.data)?,
        Some(_) => {
            let drafts = sample_draft(&model, &sd.data, cfg.n_drafts, &RngStream::new(seed, "drafts", stream))?;
            let pairs = build_coupling(
                &drafts,
                &sd.data,
                CouplingSpec::knn_injected(cfg.k, cfg.k_inject),
                &RngStream::new(seed, "coupling", stream),
            )?;
            train(&cfg, &pairs)?
        }
    };
    let val_init = sample_draft(&model, &sd.data, cfg.n_validation, &RngStream::new(seed, "validation-init", stream))?;
    let eval_init = sample_draft(&model, &sd.data, cfg.n_eval, &RngStream::new(seed, "eval-init", stream))?;
    let source_skl = skl(&eval_init, &sd.reference, cfg.eps)?;
    let mut evals = Vec::with_capacity(grid.len());
    for &t0 in &grid {
        let (best, val_skl) = select_snapshot(&out.snapshots, &val_init, &sd.validation, t0, &cfg, stream)?;
        let g = generate(
            &best.params,
            &eval_init,
            t0,
            cfg.step_size,
            cfg.n_eval,
            &RngStream::new(seed, "eval-sample", stream),
        )?;
        let value = skl(&g.samples, &sd.reference, cfg.eps)?;
        log::info!("seed {seed}: {name} t0={t0} skl={value:.4} nfe={} (snapshot {})", g.nfe, best.iteration);
        evals.push(Evaluated {
            t0,
            skl: value,
            nfe: g.nfe,
            wall_seconds: g.wall_seconds,
            selection: SelectionRow {
                run_id: run_id(seed, &name, t0),
                t0,
                iteration: best.iteration,
                validation_skl: val_skl,
            },
            samples: g.samples,
        });
    }
    Ok(JobResult {
        job,
        name,
        p_noise,
        source_skl,
        out,
        evals,
    })
}

/// Lowest validation SKL at `t0`; ties go to the earlier snapshot.
fn select_snapshot<'a>(
    snapshots: &'a [Snapshot],
    init: &Dataset,
    validation: &Dataset,
    t0: f64,
    cfg: &RunConfig,
    stream: u64,
) -> Result<(&'a Snapshot, f64)> {
    let mut best: Option<(&Snapshot, f64)> = None;
    for snap in snapshots {
        let g = generate(
            &snap.params,
            init,
            t0,
            cfg.step_size,
            cfg.n_validation,
            &RngStream::new(cfg.seed, "validation-sample", stream),
        )?;
        let v = skl(&g.samples, validation, cfg.eps)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((snap, v));
        }
    }
    best.ok_or_else(|| Error::invalid("no snapshots to select from (iterations = 0?)"))
}

/// Runs the baseline and every tier for each seed and assembles the report.
pub fn run_sweep(config: &RunConfig, tiers: &[Tier], seeds: &[u64]) -> Result<SweepReport> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    if config.iterations == 0 {
        return Err(Error::invalid("a sweep needs iterations > 0"));
    }
    let data: Vec<SeedData> = seeds.iter().map(|&s| seed_data(config, s)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for seed_index in 0..seeds.len() {
        jobs.push(Job { seed_index, tier: None });
        for t in 0..tiers.len() {
            jobs.push(Job { seed_index, tier: Some(t) });
        }
    }
    let results: Vec<JobResult> = jobs
        .into_par_iter()
        .map(|job| run_job(config, tiers, seeds[job.seed_index], &data[job.seed_index], job))
        .collect::<Result<_>>()?;
    assemble(config, tiers, seeds, results, data.into_iter().next().expect("seeds non-empty").reference)
}

pub fn reproduce_table1(config: &RunConfig) -> Result<SweepReport> {
    run_sweep(config, &table1_tiers(), &table1_seeds(config.seed))
}

fn assemble(
    config: &RunConfig,
    tiers: &[Tier],
    seeds: &[u64],
    results: Vec<JobResult>,
    reference: Dataset,
) -> Result<SweepReport> {
    let find = |tier: Option<usize>| -> Vec<&JobResult> { results.iter().filter(|r| r.job.tier == tier).collect() };
    let row_median = |runs: &[&JobResult], i: usize| -> (f64, usize, f64) {
        let skls: Vec<f64> = runs.iter().map(|r| r.evals[i].skl).collect();
        let walls: Vec<f64> = runs.iter().map(|r| r.evals[i].wall_seconds).collect();
        (median(&skls), runs[0].evals[i].nfe, median(&walls))
    };

    let base_runs = find(None);
    let (base_skl, base_nfe, base_wall) = row_median(&base_runs, 0);
    let mut rows = vec![ReportRow {
        tier: BASELINE.into(),
        p_noise: 1.0,
        t0: 0.0,
        skl: base_skl,
        nfe: base_nfe,
        qualifies: true,
        wall_seconds: base_wall,
    }];
    let mut outcomes = Vec::new();
    for (t, tier) in tiers.iter().enumerate() {
        let runs = find(Some(t));
        let outcome = t0_sweep(
            &tier.t0_grid,
            |t0| {
                let i = tier.t0_grid.iter().position(|&x| x == t0).expect("grid value");
                Ok(row_median(&runs, i))
            },
            base_skl,
        )?;
        for r in &outcome.rows {
            rows.push(ReportRow {
                tier: tier.name.clone(),
                p_noise: tier.p_noise,
                t0: r.t0,
                skl: r.skl,
                nfe: r.nfe,
                qualifies: r.qualifies,
                wall_seconds: r.wall_seconds,
            });
        }
        outcomes.push((tier.name.clone(), outcome));
    }

    // per-seed outputs in (seed, baseline, tiers...) order
    let mut ordered: Vec<&JobResult> = results.iter().collect();
    ordered.sort_by_key(|r| (r.job.seed_index, r.job.tier.map_or(0, |t| t + 1)));
    let mut metrics = Vec::new();
    let mut selections = Vec::new();
    let mut sources = Vec::new();
    let mut losses = Vec::new();
    let mut models = Vec::new();
    let mut samples = Vec::new();
    for r in ordered {
        let seed = seeds[r.job.seed_index];
        for e in &r.evals {
            metrics.push(MetricsRow {
                run_id: run_id(seed, &r.name, e.t0),
                t0: e.t0,
                nfe: e.nfe,
                skl: e.skl,
                wall_seconds: e.wall_seconds,
                eps: config.eps,
                n_eval: config.n_eval,
                seed,
            });
            selections.push(e.selection.clone());
            if r.job.seed_index == 0 {
                samples.push((format!("{} t0={}", r.name, e.t0), e.samples.clone()));
            }
        }
        sources.push(SourceRow {
            seed,
            tier: r.name.clone(),
            p_noise: r.p_noise,
            skl: r.source_skl,
        });
        losses.push(LossCurve {
            seed,
            tier: r.name.clone(),
            losses: r.out.losses.clone(),
        });
        models.push((seed, r.name.clone(), r.out.params.clone()));
    }
    Ok(SweepReport {
        config: config.clone(),
        seeds: seeds.to_vec(),
        rows,
        outcomes,
        metrics,
        selections,
        sources,
        losses,
        models,
        samples,
        reference,
    })
}

pub const REPORT_HEADER: &str = "tier,p_noise,t0,skl,nfe,qualifies,wall_seconds";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.tier, r.p_noise, r.t0, r.skl, r.nfe, r.qualifies, r.wall_seconds
        ));
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a RunConfig,
    seeds: &'a [u64],
    baseline_skl: f64,
    selected: Vec<(&'a str, Option<f64>)>,
}

/// Writes the report, per-seed metrics, snapshot selections, start-sample
/// SKLs, loss curves, final checkpoints, a JSON summary, and a scatter plot
/// of the first seed's samples into `dir`.
pub fn write_report(report: &SweepReport, dir: &Path) -> Result<()> {
    let put = |name: &str, text: String| io::write_atomic(&dir.join(name), text.as_bytes());
    put("report.csv", report_csv(&report.rows))?;
    put("metrics.csv", metrics_csv(&report.metrics))?;
    let mut sel = String::from("run_id,t0,iteration,validation_skl\n");
    for s in &report.selections {
        sel.push_str(&format!("{},{},{},{}\n", s.run_id, s.t0, s.iteration, s.validation_skl));
    }
    put("selection.csv", sel)?;
    let mut src = String::from("seed,tier,p_noise,skl\n");
    for s in &report.sources {
        src.push_str(&format!("{},{},{},{}\n", s.seed, s.tier, s.p_noise, s.skl));
    }
    put("sources.csv", src)?;
    for c in &report.losses {
        put(&format!("losses/seed{}-{}.csv", c.seed, c.tier), loss_csv(&c.losses))?;
    }
    for (seed, tier, params) in &report.models {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            spec: params.dims().spec(),
            dims: params.dims(),
            t0: 0.0,
            seed: *seed,
            iteration: report.config.iterations,
            lineage: Vec::new(),
        };
        save_checkpoint(&dir.join(format!("checkpoints/seed{seed}-{tier}.ckpt")), &header, params)?;
    }
    let summary = Summary {
        config: &report.config,
        seeds: &report.seeds,
        baseline_skl: report.rows[0].skl,
        selected: report.outcomes.iter().map(|(n, o)| (n.as_str(), o.selected)).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    io::write_atomic(&dir.join("summary.json"), &json)?;
    let mut panels: Vec<(&str, &Dataset)> = vec![("data", &report.reference)];
    panels.extend(report.samples.iter().map(|(t, d)| (t.as_str(), d)));
    put("samples.svg", scatter_svg(&panels)?)?;
    Ok(())
}
