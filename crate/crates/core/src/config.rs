//! Experiment configuration (TOML) and dataset assembly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_binary, load_idx, synth_classification, Dataset, Normalizer, SynthSpec};
use crate::error::{Error, Result};
use crate::fit::PlateauRule;
use crate::growth::GrowthMethod;
use crate::model::ArchSpec;
use crate::seed::InitMethod;
use crate::train::{RoughTrainPolicy, TrainConfig};

/// Overrides `output` when set.
pub const OUTPUT_ENV: &str = "SPARSEGROW_OUTPUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    Cifar {
        dir: PathBuf,
    },
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub val_fraction: f64,
    /// Fraction of the training records kept (seeded).
    pub subsample: f64,
    pub normalize: bool,
    pub source: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            subsample: 1.0,
            normalize: true,
            source: DataSource::Synthetic(SynthSpec {
                n: 2000,
                dims: 32,
                classes: 4,
                separation: 1.0,
            }),
        }
    }
}

/// Train, validation and optional held-out test sets shaped for the network input.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

impl DataConfig {
    pub fn load(&self, input_shape: &[usize], seed: u64) -> Result<Splits> {
        let (full, test) = match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "data.source: test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                (load_idx(train_images, train_labels)?, test)
            }
            DataSource::Cifar { dir } => load_cifar_binary(dir)?,
            DataSource::Synthetic(spec) => (synth_classification(spec, seed)?, None),
        };
        let full = if self.subsample < 1.0 {
            full.subsample(self.subsample, seed)?
        } else {
            full
        };
        let (mut train, mut val) = full.split(self.val_fraction, seed)?;
        let mut test = test;
        if self.normalize {
            let norm = Normalizer::fit(&train);
            norm.apply(&mut train);
            norm.apply(&mut val);
            if let Some(t) = test.as_mut() {
                norm.apply(t);
            }
        }
        for ds in [Some(&mut train), Some(&mut val), test.as_mut()].into_iter().flatten() {
            ds.reshape(input_shape)?;
        }
        Ok(Splits { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub method: InitMethod,
    pub density: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: InitMethod::Phew,
            density: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthConfig {
    pub method: GrowthMethod,
    /// Relative growth per step: Δρ = γ·ρ.
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    pub max_steps: usize,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            method: GrowthMethod::Pwmpr,
            gamma: 0.25,
            cap: None,
            max_steps: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    /// Fraction of total centrality a τ-core must cover.
    pub tau: f64,
    pub plateau: PlateauRule,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            plateau: PlateauRule::OfAsymptote,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensiveConfig {
    /// Epoch budget of one extensive training run; dense training for this many epochs
    /// defines relative cost 1.
    pub epochs: usize,
}

impl Default for ExtensiveConfig {
    fn default() -> Self {
        Self { epochs: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Fraction of remaining weights removed per magnitude-pruning cycle.
    pub prune_ratio: f64,
    pub prune_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_density: Option<f64>,
    /// Cumulative FLOPs a static-density run must match.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_flops: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            prune_ratio: 0.2,
            prune_target: 0.1,
            static_density: None,
            static_flops: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub data: DataConfig,
    pub init: InitConfig,
    pub growth: GrowthConfig,
    pub rough: RoughTrainPolicy,
    pub stopping: StoppingConfig,
    pub train: TrainConfig,
    pub extensive: ExtensiveConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::Mlp {
                widths: vec![32, 64, 64, 4],
            },
            precision: Precision::F32,
            seeds: vec![1],
            output: PathBuf::from("runs"),
            data: DataConfig::default(),
            init: InitConfig::default(),
            growth: GrowthConfig::default(),
            rough: RoughTrainPolicy::default(),
            stopping: StoppingConfig::default(),
            train: TrainConfig::default(),
            extensive: ExtensiveConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

fn field(name: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {why}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        // TOML integers are signed
        if let Some(s) = self.seeds.iter().find(|&&s| i64::try_from(s).is_err()) {
            return Err(field("seeds", format!("{s} exceeds {}", i64::MAX)));
        }
        let d = &self.data;
        if !(0.0..1.0).contains(&d.val_fraction) || d.val_fraction == 0.0 {
            return Err(field("data.val_fraction", "must lie in (0, 1)"));
        }
        if !(d.subsample > 0.0 && d.subsample <= 1.0) {
            return Err(field("data.subsample", "must lie in (0, 1]"));
        }
        if !(self.init.density > 0.0 && self.init.density <= 1.0) {
            return Err(field("init.density", "must lie in (0, 1]"));
        }
        if !(self.growth.gamma > 0.0 && self.growth.gamma.is_finite()) {
            return Err(field("growth.gamma", "must be positive"));
        }
        if let Some(cap) = self.growth.cap {
            if !(cap > 0.0 && cap <= 1.0) {
                return Err(field("growth.cap", "must lie in (0, 1]"));
            }
        }
        self.rough.validate()?;
        if !(self.stopping.tau > 0.0 && self.stopping.tau <= 1.0) {
            return Err(field("stopping.tau", "must lie in (0, 1]"));
        }
        self.train.optimizer.validate()?;
        if !(self.train.bn_momentum > 0.0 && self.train.bn_momentum <= 1.0) {
            return Err(field("train.bn_momentum", "must lie in (0, 1]"));
        }
        if self.train.eval_batch == 0 {
            return Err(field("train.eval_batch", "must be positive"));
        }
        if self.extensive.epochs == 0 {
            return Err(field("extensive.epochs", "must be positive"));
        }
        let b = &self.baseline;
        if !(b.prune_ratio > 0.0 && b.prune_ratio < 1.0) {
            return Err(field("baseline.prune_ratio", "must lie in (0, 1)"));
        }
        if !(b.prune_target > 0.0 && b.prune_target < 1.0) {
            return Err(field("baseline.prune_target", "must lie in (0, 1)"));
        }
        if let Some(s) = b.static_density {
            if !(s > 0.0 && s <= 1.0) {
                return Err(field("baseline.static_density", "must lie in (0, 1]"));
            }
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            if s.classes != self.arch.classes() {
                return Err(field(
                    "data.source.classes",
                    format!("{} classes but the network has {} outputs", s.classes, self.arch.classes()),
                ));
            }
            if s.dims != self.arch.input_shape().iter().product::<usize>() {
                return Err(field("data.source.dims", "does not match the network input size"));
            }
        }
        Ok(())
    }

    /// Output root, honouring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.clone(),
        }
    }

    /// Artifact directory for one `(method tag, seed)` run.
    pub fn run_dir(&self, tag: &str, seed: u64) -> PathBuf {
        self.output_root().join(format!("{tag}-seed{seed}"))
    }
}
