//! Run configuration, serialized as one flat JSON object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of a run. Missing keys in a config file fall back to the
/// two-moons defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Warm-start time; 0 is the cold-start baseline.
    pub t0: f64,
    /// Global-time Euler step `h`.
    pub step_size: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub embed_dim: usize,

    pub vocab: u32,
    pub n_data: usize,
    pub noise_std: f64,
    pub n_drafts: usize,
    pub k: usize,
    pub k_inject: usize,
    pub n_vanilla_pairs: usize,
    pub n_eval: usize,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub n_validation: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t0: 0.0,
            step_size: 0.05,
            batch_size: 256,
            iterations: 50_000,
            learning_rate: 3e-4,
            hidden_dim: 128,
            n_layers: 4,
            embed_dim: 128,
            vocab: 128,
            n_data: 100_000,
            noise_std: crate::grid::DEFAULT_MOON_NOISE,
            n_drafts: 100_000,
            k: 5,
            k_inject: 5,
            n_vanilla_pairs: 200_000,
            n_eval: 100_000,
            eps: 1e-6,
            checkpoint_every: 5_000,
            n_validation: 10_000,
        }
    }
}

impl RunConfig {
    pub const FINETUNE_LEARNING_RATE: f64 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(0.0..1.0).contains(&self.t0) {
            return bad("t0 must be in [0, 1)");
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return bad("step_size must be in (0, 1]");
        }
        if self.t0 + self.step_size > 1.0 + 1e-9 {
            return bad("t0 + step_size must not exceed 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("hidden_dim and embed_dim must be > 0");
        }
        if self.n_layers < 2 {
            return bad("n_layers must be >= 2");
        }
        if self.vocab < 2 {
            return bad("vocab must be >= 2");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Overrides keys from a flat JSON object, then re-validates.
    pub fn merged(&self, overrides: &serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("RunConfig serializes to an object");
        for (k, val) in overrides {
            obj.insert(k.clone(), val.clone());
        }
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json_str(r#"{"seed": 9, "t0": 0.8}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.t0, 0.8);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn rejects_bad_clock_and_unknown_keys() {
        assert!(RunConfig::from_json_str(r#"{"t0": 1.0}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"t0": 0.97, "step_size": 0.05}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"t0": 0.95, "step_size": 0.05}"#).is_ok());
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn merge_overrides() {
        let mut o = serde_json::Map::new();
        o.insert("iterations".into(), 10.into());
        let c = RunConfig::default().merged(&o).unwrap();
        assert_eq!(c.iterations, 10);
    }
}
