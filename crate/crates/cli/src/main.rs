use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use wsdfm::coupling::{build_coupling, load_pairs, save_pairs, CouplingSpec};
use wsdfm::drafts::{sample_draft, DraftModel};
use wsdfm::eval::{skl, write_metrics, MetricsRow};
use wsdfm::experiment::{report_csv, reproduce_table1, run_sweep, write_report, Tier};
use wsdfm::grid::{two_moons_dataset, GridSpec};
use wsdfm::net::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_FORMAT};
use wsdfm::plot::scatter_svg;
use wsdfm::sample::{generate, write_sidecar, SampleMeta};
use wsdfm::train::{finetune, train, train_vanilla, write_loss_csv, TrainOutput};
use wsdfm::{Dataset, RngStream, RunConfig};

#[derive(Parser)]
#[command(name = "wsdfm", version, about = "Warm-start discrete flow matching on token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a flat JSON file, then `--seed`, then `--set` pairs.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set iterations=2000` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-moons dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt data rows into draft samples.
    MakeDrafts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        p_noise: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair drafts with nearest data neighbors plus random data samples.
    BuildPairs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        drafts: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_inject: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a pairs file, or a vanilla model on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        pairs: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint (learning rate defaults to 1e-5).
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss_out: Option<PathBuf>,
        /// Also write every intermediate snapshot here.
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Start samples; uniform noise when omitted.
        #[arg(long)]
        drafts: Option<PathBuf>,
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// SKL between generated samples and data, appended as a metrics row.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline plus a t0 sweep for each draft tier.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated corruption levels.
        #[arg(long, value_delimiter = ',', required = true)]
        draft_tiers: Vec<f64>,
        /// Comma-separated start times, descending.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        t0_grid: Vec<f64>,
        #[arg(long)]
        out_report: PathBuf,
        /// Directory for metrics, loss curves, checkpoints, and plots.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// The full results table: three tiers, three seeds.
    ReproduceTable1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Scatter plot of one or more datasets, side by side.
    Plot {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<wsdfm::Error>() {
        Some(inner) if !inner.is_usage() => 3,
        _ => 2,
    }
}

/// Loaded configuration and whether the user set `learning_rate` anywhere.
fn load_config(args: &ConfigArgs, extra: Map<String, Value>) -> Result<(RunConfig, bool)> {
    let mut user_lr = false;
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| wsdfm::Error::Io { path: path.clone(), source: e })?;
            let raw: Map<String, Value> =
                serde_json::from_str(&text).map_err(wsdfm::Error::from).with_context(|| format!("config {}", path.display()))?;
            user_lr |= raw.contains_key("learning_rate");
            RunConfig::from_json_str(&text)?
        }
        None => RunConfig::default(),
    };
    let mut overrides = extra;
    if let Some(seed) = args.seed {
        overrides.insert("seed".into(), json!(seed));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| wsdfm::Error::InvalidArgument(format!("--set {kv:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        overrides.insert(k.trim().to_string(), value);
    }
    user_lr |= overrides.contains_key("learning_rate");
    Ok((base.merged(&overrides)?, user_lr))
}

fn overrides<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Map<String, Value> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
}

fn two_moons_spec(cfg: &RunConfig) -> Result<GridSpec> {
    Ok(GridSpec::new(2, cfg.vocab)?)
}

fn read_data(path: &Path, vocab: u32) -> Result<Dataset> {
    Ok(Dataset::read_csv(path, vocab)?)
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::GenData { cfg, n, out } => {
            let (c, _) = load_config(&cfg, overrides([("n_data", n.map(|n| json!(n)))]))?;
            if c.n_data == 0 {
                return Err(wsdfm::Error::InvalidArgument("--n must be > 0".into()).into());
            }
            let data = two_moons_dataset(c.n_data, c.noise_std, two_moons_spec(&c)?, &RngStream::new(c.seed, "data", 0))?;
            data.write_csv(&out)?;
            Ok(json!({"command": "gen-data", "out": out, "n": data.len(), "seed": c.seed, "noise_std": c.noise_std}))
        }
        Command::MakeDrafts { cfg, data, p_noise, n, out } => {
            let (c, _) = load_config(&cfg, Map::new())?;
            let model = DraftModel::corrupted(p_noise)?;
            let d = read_data(&data, c.vocab)?;
            let drafts = sample_draft(&model, &d, n, &RngStream::new(c.seed, "drafts", 0))?;
            drafts.write_csv(&out)?;
            Ok(json!({"command": "make-drafts", "out": out, "n": drafts.len(), "p_noise": p_noise, "seed": c.seed}))
        }
        Command::BuildPairs { cfg, drafts, data, k, k_inject, out } => {
            let (c, _) = load_config(
                &cfg,
                overrides([("k", k.map(|v| json!(v))), ("k_inject", k_inject.map(|v| json!(v)))]),
            )?;
            let d = read_data(&data, c.vocab)?;
            let dr = read_data(&drafts, c.vocab)?;
            let pairs = build_coupling(&dr, &d, CouplingSpec::knn_injected(c.k, c.k_inject), &RngStream::new(c.seed, "coupling", 0))?;
            save_pairs(&pairs, &out)?;
            Ok(json!({"command": "build-pairs", "out": out, "n_pairs": pairs.len(), "k": c.k, "k_inject": c.k_inject, "seed": c.seed}))
        }
        Command::Train { cfg, pairs, data, init_ckpt, out_ckpt, loss_out, snapshot_dir } => {
            let (mut c, user_lr) = load_config(&cfg, Map::new())?;
            let base = init_ckpt.as_deref().map(load_checkpoint).transpose()?;
            if base.is_some() && !user_lr {
                c.learning_rate = RunConfig::FINETUNE_LEARNING_RATE;
            }
            let (out, t0): (TrainOutput, f64) = match (&pairs, &data) {
                (Some(p), None) => {
                    let p = load_pairs(p, c.vocab)?;
                    let out = match &base {
                        Some((_, params)) => finetune(params, &c, &p)?,
                        None => train(&c, &p)?,
                    };
                    (out, c.t0)
                }
                (None, Some(d)) => {
                    let d = read_data(d, c.vocab)?;
                    let out = match &base {
                        Some((_, params)) => {
                            let vc = RunConfig { t0: 0.0, ..c.clone() };
                            finetune(params, &vc, &wsdfm::train::vanilla_pairs(&vc, &d)?)?
                        }
                        None => train_vanilla(&c, &d)?,
                    };
                    (out, 0.0)
                }
                _ => bail!(wsdfm::Error::InvalidArgument("give exactly one of --pairs or --data".into())),
            };
            let mut lineage = base.map(|(h, _)| h.lineage).unwrap_or_default();
            lineage.push(out.lineage.clone());
            let header = |iteration| CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                spec: out.params.dims().spec(),
                dims: out.params.dims(),
                t0,
                seed: c.seed,
                iteration,
                lineage: lineage.clone(),
            };
            save_checkpoint(&out_ckpt, &header(c.iterations), &out.params)?;
            if let Some(dir) = &snapshot_dir {
                for s in &out.snapshots {
                    save_checkpoint(&dir.join(format!("iter{:07}.ckpt", s.iteration)), &header(s.iteration), &s.params)?;
                }
            }
            let loss_path = loss_out.unwrap_or_else(|| out_ckpt.with_extension("loss.csv"));
            write_loss_csv(&loss_path, &out.losses)?;
            Ok(json!({
                "command": "train",
                "out_ckpt": out_ckpt,
                "loss_csv": loss_path,
                "iterations": c.iterations,
                "learning_rate": c.learning_rate,
                "first_loss": out.losses.first(),
                "final_loss": out.losses.last(),
                "seed": c.seed,
            }))
        }
        Command::Sample { cfg, ckpt, drafts, t0, h, n, out } => {
            let (c, _) = load_config(
                &cfg,
                overrides([
                    ("t0", t0.map(|v| json!(v))),
                    ("step_size", h.map(|v| json!(v))),
                    ("n_eval", n.map(|v| json!(v))),
                ]),
            )?;
            let (header, params) = load_checkpoint(&ckpt)?;
            let spec = header.spec;
            let init = match &drafts {
                Some(p) => {
                    let d = read_data(p, spec.vocab)?;
                    d.spec().ensure_same(&spec)?;
                    d
                }
                None => {
                    let uniform = Dataset::new(spec, vec![0; spec.n_tokens])?;
                    sample_draft(&DraftModel::uniform_noise(), &uniform, c.n_eval, &RngStream::new(c.seed, "noise", 0))?
                }
            };
            let g = generate(&params, &init, c.t0, c.step_size, c.n_eval, &RngStream::new(c.seed, "sample", 0))?;
            g.samples.write_csv(&out)?;
            let meta = SampleMeta {
                t0: c.t0,
                h: c.step_size,
                nfe: g.nfe,
                n: c.n_eval,
                wall_seconds: g.wall_seconds,
                seed: c.seed,
                checkpoint: Some(ckpt.display().to_string()),
            };
            write_sidecar(&sidecar_path(&out), &meta)?;
            Ok(json!({"command": "sample", "out": out, "nfe": g.nfe, "n": c.n_eval, "t0": c.t0, "h": c.step_size, "wall_seconds": g.wall_seconds}))
        }
        Command::Eval { cfg, samples, data, run_id, out } => {
            let (c, _) = load_config(&cfg, Map::new())?;
            let s = read_data(&samples, c.vocab)?;
            let d = read_data(&data, c.vocab)?;
            let value = skl(&s, &d, c.eps)?;
            let meta: Option<SampleMeta> = std::fs::read_to_string(sidecar_path(&samples))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok());
            let row = MetricsRow {
                run_id: run_id.unwrap_or_else(|| stem(&samples)),
                t0: meta.as_ref().map_or(c.t0, |m| m.t0),
                nfe: meta.as_ref().map_or(0, |m| m.nfe),
                skl: value,
                wall_seconds: meta.as_ref().map_or(0.0, |m| m.wall_seconds),
                eps: c.eps,
                n_eval: s.len(),
                seed: meta.as_ref().map_or(c.seed, |m| m.seed),
            };
            write_metrics(&out, std::slice::from_ref(&row))?;
            Ok(json!({"command": "eval", "out": out, "skl": value, "eps": c.eps, "n_eval": s.len(), "nfe": row.nfe}))
        }
        Command::Sweep { cfg, draft_tiers, t0_grid, out_report, out_dir } => {
            let (c, _) = load_config(&cfg, Map::new())?;
            if t0_grid.is_empty() {
                bail!(wsdfm::Error::InvalidArgument("--t0-grid is empty".into()));
            }
            let mut grid = t0_grid.clone();
            grid.sort_by(|a, b| b.total_cmp(a));
            let tiers = draft_tiers
                .iter()
                .map(|&p| Tier::new(format!("p{p}"), p, grid.clone()))
                .collect::<wsdfm::Result<Vec<_>>>()?;
            let report = run_sweep(&c, &tiers, &[c.seed])?;
            wsdfm::io::write_atomic(&out_report, report_csv(&report.rows).as_bytes())?;
            if let Some(dir) = &out_dir {
                write_report(&report, dir)?;
            }
            Ok(json!({
                "command": "sweep",
                "out_report": out_report,
                "baseline_skl": report.rows[0].skl,
                "selected": report.outcomes.iter().map(|(n, o)| (n.clone(), json!(o.selected))).collect::<Map<_, _>>(),
            }))
        }
        Command::ReproduceTable1 { cfg, out_dir } => {
            let (c, _) = load_config(&cfg, Map::new())?;
            let report = reproduce_table1(&c)?;
            write_report(&report, &out_dir)?;
            Ok(json!({
                "command": "reproduce-table1",
                "out_dir": out_dir,
                "rows": report.rows.len(),
                "baseline_skl": report.rows[0].skl,
                "selected": report.outcomes.iter().map(|(n, o)| (n.clone(), json!(o.selected))).collect::<Map<_, _>>(),
            }))
        }
        Command::Plot { cfg, data, out } => {
            let (c, _) = load_config(&cfg, Map::new())?;
            let sets = data
                .iter()
                .map(|p| read_data(p, c.vocab).map(|d| (stem(p), d)))
                .collect::<Result<Vec<_>>>()?;
            let panels: Vec<(&str, &Dataset)> = sets.iter().map(|(t, d)| (t.as_str(), d)).collect();
            let svg = scatter_svg(&panels)?;
            let circles = svg.matches("<circle").count();
            wsdfm::io::write_atomic(&out, svg.as_bytes())?;
            Ok(json!({"command": "plot", "out": out, "panels": panels.len(), "points": circles}))
        }
    }
}

fn sidecar_path(samples: &Path) -> PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| anyhow!("no file name"))
        .unwrap_or_else(|_| p.display().to_string())
}
