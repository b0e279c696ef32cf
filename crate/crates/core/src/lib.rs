//! Warm-start discrete flow matching on categorical token grids.
//!
//! A categorical posterior network bridges a draft distribution, placed at
//! time `t0`, to the data distribution at time 1. Sampling runs Euler steps
//! of the induced continuous-time Markov chain from `t0` to 1, so a run with
//! global step `h` costs `ceil((1 - t0) / h)` network evaluations.
//!
//! Module map:
//! - [`grid`]: grid specs, datasets, two-moons data, quantization
//! - [`path`]: mixture paths, pinned generators, warm-start clock
//! - [`coupling`]: independent and nearest-neighbor couplings
//! - [`drafts`]: draft sources
//! - [`net`]: posterior network, backprop, AMSGrad, checkpoints
//! - [`train`]: training loop
//! - [`sample`]: Euler CTMC generation
//! - [`eval`]: SKL metric, exact posterior oracle, t0 selection
//! - [`experiment`]: sweep and table drivers
//! - [`plot`]: SVG scatter panels

pub mod config;
pub mod coupling;
pub mod drafts;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod net;
pub mod path;
pub mod plot;
pub mod rng;
pub mod sample;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{Dataset, GridSpec, TokenSeq};
pub use rng::RngStream;
