//! Checkpoint files: one JSON header line, then the flat parameter buffer as
//! little-endian `f32` values (embedding, then each layer's weight and bias).

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetDims};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io;

pub const CHECKPOINT_FORMAT: &str = "wsdfm-checkpoint-v1";

/// One training stage a checkpoint went through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: GridSpec,
    pub dims: NetDims,
    pub t0: f64,
    pub seed: u64,
    pub iteration: usize,
    #[serde(default)]
    pub lineage: Vec<LineageEntry>,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams<f32>) -> Result<()> {
    if header.dims != params.dims() {
        return Err(Error::DimensionMismatch(
            "checkpoint header dims differ from parameter dims".into(),
        ));
    }
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.reserve(params.as_slice().len() * 4);
    for v in params.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: format!("bad checkpoint header: {e}"),
    })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!(
            "unknown checkpoint format {:?}",
            header.format
        )));
    }
    if header.dims.spec() != header.spec {
        return Err(Error::Validation("checkpoint dims disagree with its grid".into()));
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let n = header.dims.n_params();
    if raw.len() != 4 * n {
        return Err(Error::Validation(format!(
            "checkpoint body has {} bytes, expected {}",
            raw.len(),
            4 * n
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_flat(header.dims, data)?;
    Ok((header, params))
}
