//! The run configuration read by every CLI command.
//!
//! Parsing is strict: an unknown key anywhere is an error. Missing keys take
//! the defaults below, and `--print-config` shows the fully resolved document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegNetConfig;
use crate::selftrain::{AdaptationConfig, PretrainConfig};
use crate::synth::BenchmarkSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationConfig,
    /// Independent seeds per method in `ablate`; run `i` uses `seed + i`.
    pub ablation_runs: usize,
    /// Timed steps per method in `bench` (warm-up excluded).
    pub bench_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            adapt: AdaptationConfig::default(),
            ablation_runs: 5,
            bench_steps: 50,
        }
    }
}

/// Output layout. Relative subdirectories resolve against `output_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

impl PathsConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn data(&self) -> PathBuf {
        self.resolve(&self.data_dir)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.checkpoint_dir)
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.report_dir)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: BenchmarkSpec,
    pub model: SegNetConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source.validate()?;
        self.data.target.validate()?;
        self.model.validate()?;
        self.train.adapt.validate()?;
        self.train.pretrain.optimizer.validate()?;
        if self.train.pretrain.batch_size == 0 {
            return Err(Error::Config("train.pretrain.batch_size must be >= 1".into()));
        }
        let m = self.model.spatial_multiple();
        if self.data.patch_size == 0 || !self.data.patch_size.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "data.patch_size {} must be a positive multiple of {m} for model depth {}",
                self.data.patch_size, self.model.depth
            )));
        }
        if self.data.n_source == 0 || self.data.n_target == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("data.n_source, n_target and n_eval must all be >= 1".into()));
        }
        if self.model.num_classes != crate::synth::NUM_CLASSES {
            return Err(Error::Config(format!(
                "model.num_classes must be {} for the synthetic benchmark",
                crate::synth::NUM_CLASSES
            )));
        }
        if self.train.ablation_runs == 0 {
            return Err(Error::Config("train.ablation_runs must be >= 1".into()));
        }
        if self.train.bench_steps < crate::metrics::BENCH_MIN_STEPS {
            return Err(Error::Config(format!("train.bench_steps must be >= {}", crate::metrics::BENCH_MIN_STEPS)));
        }
        Ok(())
    }
}
