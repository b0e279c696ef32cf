//! Training loop for the posterior network.
//!
//! Each iteration draws a batch of pairs, a local time `s ~ U[0, 1)` per
//! example, and `x_s` from the pinned marginal between the pair's source and
//! target. The loss is the cross-entropy of the predicted posterior against
//! the target tokens at every position. Vanilla training is the same loop
//! over independent pairs of uniform-noise sources and data.

use std::path::Path;

use crate::config::RunConfig;
use crate::coupling::{independent_pairs, PairedDataset};
use crate::drafts::{sample_draft, DraftModel};
use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::io;
use crate::net::{AmsGrad, Batch, LineageEntry, ModelParams, NetDims};
use crate::path::{sample_xt, KappaSchedule};
use crate::rng::RngStream;

/// Parameters after a given number of optimizer steps.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: ModelParams<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    /// `losses[i]` is the batch loss evaluated before step `i`.
    pub losses: Vec<f64>,
    /// Every `checkpoint_every` steps, plus the final step.
    pub snapshots: Vec<Snapshot>,
    pub lineage: LineageEntry,
}

pub fn net_dims(config: &RunConfig, pairs: &PairedDataset) -> Result<NetDims> {
    let spec = pairs.spec();
    if spec.vocab != config.vocab {
        return Err(Error::DimensionMismatch(format!(
            "config vocab {} but pairs use vocab {}",
            config.vocab, spec.vocab
        )));
    }
    NetDims::new(spec, config.embed_dim, config.hidden_dim, config.n_layers)
}

/// One training batch drawn from stream `rng`.
pub fn draw_batch(
    pairs: &PairedDataset,
    batch_size: usize,
    schedule: KappaSchedule,
    rng: &mut RngStream,
) -> Result<Batch> {
    let mut batch = Batch::default();
    for _ in 0..batch_size {
        let j = rng.index_below(pairs.len());
        let s = rng.uniform();
        let xs = sample_xt(s, pairs.src(j), pairs.dst(j), schedule, rng)?;
        batch.push(s, &xs, pairs.dst(j));
    }
    Ok(batch)
}

pub fn train(config: &RunConfig, pairs: &PairedDataset) -> Result<TrainOutput> {
    config.validate()?;
    let dims = net_dims(config, pairs)?;
    let init = ModelParams::init(dims, &mut RngStream::new(config.seed, "init", 0));
    run(init, config, pairs, "train")
}

/// Trains on independent pairs of uniform-noise sources and data, with
/// `t0 = 0`.
pub fn train_vanilla(config: &RunConfig, data: &Dataset) -> Result<TrainOutput> {
    let pairs = vanilla_pairs(config, data)?;
    let config = RunConfig { t0: 0.0, ..config.clone() };
    train(&config, &pairs)
}

pub fn vanilla_pairs(config: &RunConfig, data: &Dataset) -> Result<PairedDataset> {
    let n = config.n_vanilla_pairs;
    let noise = sample_draft(
        &DraftModel::uniform_noise(),
        data,
        n,
        &RngStream::new(config.seed, "vanilla-noise", 0),
    )?;
    independent_pairs(&noise, data, n, &RngStream::new(config.seed, "vanilla-pairs", 0))
}

/// Continues training `base` with `config.learning_rate`.
pub fn finetune(base: &ModelParams<f32>, config: &RunConfig, pairs: &PairedDataset) -> Result<TrainOutput> {
    config.validate()?;
    let dims = net_dims(config, pairs)?;
    if dims != base.dims() {
        return Err(Error::DimensionMismatch(format!(
            "base network {:?} does not match config/pairs {:?}",
            base.dims(),
            dims
        )));
    }
    run(base.clone(), config, pairs, "finetune")
}

fn run(mut params: ModelParams<f32>, config: &RunConfig, pairs: &PairedDataset, stage: &str) -> Result<TrainOutput> {
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    let schedule = KappaSchedule::Linear;
    let mut opt = AmsGrad::new(params.as_slice().len());
    let mut losses = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    for it in 0..config.iterations {
        let mut rng = RngStream::new(config.seed, stage, it as u64);
        let batch = draw_batch(pairs, config.batch_size, schedule, &mut rng)?;
        let (loss, grads) = params.loss_and_grads(&batch).map_err(|e| at_iteration(e, it))?;
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                context: format!("iteration {it}"),
                msg: format!("non-finite gradient at parameter {bad}"),
            });
        }
        opt.step(&mut params, &grads, config.learning_rate)?;
        losses.push(loss);
        let done = it + 1;
        let at_checkpoint = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if at_checkpoint || done == config.iterations {
            log::info!("{stage}: iteration {done}/{} loss {loss:.4}", config.iterations);
            snapshots.push(Snapshot {
                iteration: done,
                params: params.clone(),
            });
        }
    }
    Ok(TrainOutput {
        params,
        losses,
        snapshots,
        lineage: LineageEntry {
            stage: stage.into(),
            seed: config.seed,
            iterations: config.iterations,
            learning_rate: config.learning_rate,
            n_pairs: pairs.len(),
        },
    })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numerical { context, msg } => Error::Numerical {
            context: format!("iteration {it}, {context}"),
            msg,
        },
        other => other,
    }
}

/// Trailing mean over `window` values; the first `window - 1` entries
/// average what is available.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    io::write_atomic(path, loss_csv(losses).as_bytes())
}
