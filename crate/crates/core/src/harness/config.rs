use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{AlphaMode, SamplerKind};
use crate::nnkit::LrSchedule;
use crate::robust::RobustMode;
use crate::stream::NoiseType;

/// Gaussian-blob dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Examples per class before the train/test split.
    pub per_class: usize,
    /// Class means lie on a shell of this radius.
    pub radius: f64,
    /// Within-class standard deviation per coordinate.
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            per_class: 500,
            radius: 6.0,
            sigma: 1.5,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config(path)?)
    }
}

/// Flat experiment configuration. Every key is optional in the file; the
/// defaults describe the canonical desk-scale run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `"synthetic"` or a path to a dataset CSV.
    pub dataset: String,
    /// Class count `C`.
    pub classes: usize,
    /// Feature dimension `D`.
    pub dim: usize,
    pub per_class: usize,
    pub radius: f64,
    pub sigma: f64,
    pub test_fraction: f64,
    /// Task count `T`.
    pub tasks: usize,
    /// Minor-class share `L` of every task.
    pub blurry: f64,
    pub noise_type: NoiseType,
    pub noise_ratio: f64,
    /// Memory capacity `K`.
    pub memory_size: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub robust_mode: RobustMode,
    pub alpha_mode: AlphaMode,
    /// Weight of the consistency term.
    pub eta: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub memory_epochs: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    /// Epochs for the jointly trained model behind the diversity metric.
    pub oracle_epochs: usize,
    pub weak_sigma: f64,
    pub strong_drop: f64,
    pub strong_sigma: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            dataset: "synthetic".into(),
            classes: spec.classes,
            dim: spec.dim,
            per_class: spec.per_class,
            radius: spec.radius,
            sigma: spec.sigma,
            test_fraction: 0.2,
            tasks: 5,
            blurry: 0.1,
            noise_type: NoiseType::Symmetric,
            noise_ratio: 0.4,
            memory_size: 200,
            batch_size: 16,
            sampler: SamplerKind::PuriDivER,
            robust_mode: RobustMode::Full,
            alpha_mode: AlphaMode::Adaptive,
            eta: 1.0,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            memory_epochs: 20,
            hidden: 64,
            oracle_epochs: 20,
            weak_sigma: 0.05,
            strong_drop: 0.2,
            strong_sigma: 0.15,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("out"),
        }
    }
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset == "synthetic"
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            per_class: self.per_class,
            radius: self.radius,
            sigma: self.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.classes == 0 || self.dim == 0 || self.hidden == 0 {
            return fail("classes, dim and hidden must be positive".into());
        }
        if self.memory_size == 0 {
            return fail("memory_size must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return fail(format!("noise_ratio must be in [0, 1), got {}", self.noise_ratio));
        }
        if self.tasks == 0 || self.tasks > self.classes {
            return fail(format!(
                "tasks must be in [1, classes = {}], got {}",
                self.classes, self.tasks
            ));
        }
        if !(0.0..1.0).contains(&self.blurry) {
            return fail(format!("blurry must be in [0, 1), got {}", self.blurry));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(0.0..=1.0).contains(&a) {
                return fail(format!("fixed alpha must be in [0, 1], got {a}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be non-negative, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return fail(format!("test_fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if !(0.0..1.0).contains(&self.strong_drop) || self.weak_sigma < 0.0 || self.strong_sigma < 0.0 {
            return fail("augmentation parameters out of range".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.is_synthetic() && self.per_class < 2 {
            return fail("synthetic data needs per_class >= 2".into());
        }
        Ok(())
    }
}
