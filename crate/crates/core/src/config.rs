//! Run configuration file (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::Manifest;
use crate::error::{ensure, Error, Result};
use crate::preprocess::{DEFAULT_CLIP_BOUND, DEFAULT_LEVELS, DEFAULT_MAX_FIT_SAMPLES, DEFAULT_WHITEN_EPS};
use crate::sampling::{DEFAULT_REPEATS, DEFAULT_SAMPLE_SIZE, DEFAULT_SEED};
use crate::trainer::{AdamConfig, GradCheckConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Target dimension per modality; modalities not listed keep their dim.
    pub dims: BTreeMap<String, usize>,
    pub clip_bound: f64,
    pub levels: u32,
    pub whiten_eps: f64,
    pub max_fit_samples: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dims: BTreeMap::new(),
            clip_bound: DEFAULT_CLIP_BOUND,
            levels: DEFAULT_LEVELS,
            whiten_eps: DEFAULT_WHITEN_EPS,
            max_fit_samples: DEFAULT_MAX_FIT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sample_size: usize,
    pub repeats: usize,
    pub hidden: usize,
    pub experts: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub threads: usize,
    /// Cluster count overrides keyed by modality name.
    pub clusters: BTreeMap<String, usize>,
    pub optimizer: AdamConfig,
    pub preprocess: PreprocessConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: DEFAULT_SEED,
            sample_size: DEFAULT_SAMPLE_SIZE,
            repeats: DEFAULT_REPEATS,
            hidden: train.hidden,
            experts: train.experts,
            batch_size: train.batch_size,
            epochs: train.epochs,
            threads: train.threads,
            clusters: BTreeMap::new(),
            optimizer: AdamConfig::default(),
            preprocess: PreprocessConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("config: {what}")));
        if self.sample_size == 0 {
            return bad("sample_size must be >= 1");
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        if self.hidden == 0 || self.experts == 0 {
            return bad("hidden and experts must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.clusters.values().any(|&k| k == 0) {
            return bad("cluster counts must be >= 1");
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad("optimizer.lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        if !(o.eps > 0.0) {
            return bad("optimizer.eps must be > 0");
        }
        let p = &self.preprocess;
        if !(p.clip_bound > 0.0) || p.levels < 2 || !(p.whiten_eps >= 0.0) || p.max_fit_samples == 0 {
            return bad("invalid preprocess section");
        }
        if p.dims.values().any(|&d| d == 0) {
            return bad("preprocess dims must be >= 1");
        }
        let g = &self.gradcheck;
        if g.modalities.is_empty() || g.modalities.iter().any(|&(d, k)| d == 0 || k == 0) {
            return bad("gradcheck modalities need positive dim and clusters");
        }
        if !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return bad("gradcheck step and tolerance must be > 0");
        }
        Ok(())
    }

    /// Checks that modality names referenced by the config exist in `manifest`.
    pub fn check_manifest(&self, manifest: &Manifest) -> Result<()> {
        for name in self.clusters.keys().chain(self.preprocess.dims.keys()) {
            ensure!(
                manifest.modality(name).is_some(),
                Error::InvalidArgument(format!("config names unknown modality {name:?}"))
            );
        }
        for (name, &d) in &self.preprocess.dims {
            let dim = manifest.modality(name).map(|m| m.dim).unwrap_or(0);
            ensure!(
                d <= dim,
                Error::InvalidArgument(format!("preprocess dim {d} for {name:?} exceeds its input dim {dim}"))
            );
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            experts: self.experts,
            sample_size: self.sample_size,
            batch_size: self.batch_size,
            epochs: self.epochs,
            threads: self.threads,
            optimizer: self.optimizer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sample_size, 50);
        assert_eq!(cfg.repeats, 5);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.gradcheck.modalities, vec![(4, 3), (4, 3)]);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.clusters.insert("rgb".into(), 16);
        cfg.preprocess.dims.insert("rgb".into(), 8);
        cfg.optimizer.lr = 0.005;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::parse("hidden = 16\n[optimizer]\nlr = 0.01\n[clusters]\naudio = 4\n").unwrap();
        assert_eq!(cfg.hidden, 16);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        assert_eq!(cfg.clusters["audio"], 4);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "sample_size = 0",
            "repeats = 0",
            "[optimizer]\nbeta1 = 1.0",
            "[clusters]\na = 0",
            "[gradcheck]\nstep = 0.0",
            "unknown_key = 1",
            "hidden = \"x\"",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
