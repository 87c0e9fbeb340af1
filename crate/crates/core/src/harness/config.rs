//! Experiment configuration and its flat `key=value` file format.
//!
//! One assignment per line, `#` starts a comment line, blank lines are
//! ignored, keys may appear in any order but at most once. `task.preset` is
//! applied before every other `task.*` key; `task.manifest` switches the task
//! to a dataset on disk, after which only `task.seed` (the fold-split seed)
//! may accompany it.
//!
//! | key | meaning |
//! |-----|---------|
//! | `task.preset` | `disease`, `complementary` or `mn_staging` |
//! | `task.manifest` | directory holding `manifest.json` |
//! | `task.classes` | comma-separated class names |
//! | `task.patients_per_class` | records per class |
//! | `task.raw_dims.{om,im,tem}` | raw feature width per modality |
//! | `task.tokens` | OM/IM tokens per patient |
//! | `task.bag_min`, `task.bag_max` | TEM bag size range, inclusive |
//! | `task.separability.{om,im,tem}` | class-mean spacing over noise sd |
//! | `task.structure` | `isotropic` or `complementary` |
//! | `task.patient_spread`, `task.instance_spread` | TEM noise levels |
//! | `task.outlier_rate`, `task.outlier_scale` | outlier injection |
//! | `task.seed` | data seed; also seeds the fold split |
//! | `model.dim`, `model.heads` | shared width and attention heads |
//! | `model.threshold` | SMIL retention threshold |
//! | `model.loss_weight.{om,im,tem}` | auxiliary loss weights |
//! | `model.weighted_loss`, `model.smil` | `true` / `false` |
//! | `model.fusion` | `none`, `self_attention`, `modality_attention`, `bidirectional_cross`, `cmsa` |
//! | `model.modalities` | comma-separated subset of `om,im,tem` |
//! | `model.detach_weights`, `model.output_projection` | `true` / `false` |
//! | `train.epochs`, `train.batch_size`, `train.lr0`, `train.weight_decay` | optimizer settings |
//! | `train.seed` | base seed; fold `k` uses `seed + k` |
//! | `cv.folds` | number of folds, at least 2 |
//! | `output.dir` | where reports are written |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmsa::FusionVariant;
use crate::datagen::{ClassStructure, Separability, TaskSpec};
use crate::error::{CmusError, Result};
use crate::model::{LossWeights, ModalityMask, ModelConfig, RawDims, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(TaskSpec),
    Manifest { path: PathBuf, seed: u64 },
}

impl TaskSource {
    /// Seed of the fold split.
    pub fn seed(&self) -> u64 {
        match self {
            TaskSource::Synthetic(spec) => spec.seed,
            TaskSource::Manifest { seed, .. } => *seed,
        }
    }

    pub fn set_seed(&mut self, s: u64) {
        match self {
            TaskSource::Synthetic(spec) => spec.seed = s,
            TaskSource::Manifest { seed, .. } => *seed = s,
        }
    }
}

/// Model hyperparameters that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub dim: usize,
    pub heads: usize,
    pub threshold: f64,
    pub loss_weights: LossWeights,
    pub weighted_loss: bool,
    pub smil: bool,
    pub fusion: FusionVariant,
    pub modalities: ModalityMask,
    pub detach_weights: bool,
    pub output_projection: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSettings {
            dim: m.dim,
            heads: m.heads,
            threshold: m.threshold,
            loss_weights: m.loss_weights,
            weighted_loss: m.weighted_loss,
            smil: m.smil,
            fusion: m.fusion,
            modalities: m.modalities,
            detach_weights: m.detach_weights,
            output_projection: m.output_projection,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, num_classes: usize, raw_dims: RawDims, seed: u64) -> ModelConfig {
        ModelConfig {
            num_classes,
            dim: self.dim,
            heads: self.heads,
            threshold: self.threshold,
            loss_weights: self.loss_weights,
            weighted_loss: self.weighted_loss,
            smil: self.smil,
            fusion: self.fusion,
            modalities: self.modalities,
            raw_dims,
            detach_weights: self.detach_weights,
            output_projection: self.output_projection,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub folds: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSource::Synthetic(TaskSpec::default()),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            folds: 5,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CmusError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CmusError::Config(format!("{key} expects true or false, got '{value}'"))),
    }
}

fn parse_structure(value: &str) -> Result<ClassStructure> {
    match value {
        "isotropic" => Ok(ClassStructure::Isotropic),
        "complementary" => Ok(ClassStructure::Complementary),
        _ => Err(CmusError::Config(format!("unknown task.structure '{value}'"))),
    }
}

fn structure_str(s: ClassStructure) -> &'static str {
    match s {
        ClassStructure::Isotropic => "isotropic",
        ClassStructure::Complementary => "complementary",
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(CmusError::Config(format!("cv.folds must be at least 2, got {}", self.folds)));
        }
        let (classes, raw) = match &self.task {
            TaskSource::Synthetic(spec) => {
                spec.validate()?;
                (spec.class_count(), spec.raw_dims)
            }
            TaskSource::Manifest { .. } => (2, RawDims { om: 1, im: 1, tem: 1 }),
        };
        self.model.model_config(classes, raw, 0).validate()?;
        self.train.validate()
    }

    /// Applies one assignment. `task.preset` and `task.manifest` replace the
    /// whole task.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if key == "task.preset" {
            let seed = self.task.seed();
            let mut spec = TaskSpec::preset(value)?;
            spec.seed = seed;
            self.task = TaskSource::Synthetic(spec);
            return Ok(());
        }
        if key == "task.manifest" {
            self.task = TaskSource::Manifest {
                path: PathBuf::from(value),
                seed: self.task.seed(),
            };
            return Ok(());
        }
        if key == "task.seed" {
            self.task.set_seed(parse_value(key, value)?);
            return Ok(());
        }
        if let Some(rest) = key.strip_prefix("task.") {
            let spec = match &mut self.task {
                TaskSource::Synthetic(spec) => spec,
                TaskSource::Manifest { .. } => {
                    return Err(CmusError::Config(format!(
                        "{key} does not apply to a manifest task"
                    )))
                }
            };
            return set_task(spec, key, rest, value);
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.dim" => m.dim = parse_value(key, value)?,
            "model.heads" => m.heads = parse_value(key, value)?,
            "model.threshold" => m.threshold = parse_value(key, value)?,
            "model.loss_weight.om" => m.loss_weights.om = parse_value(key, value)?,
            "model.loss_weight.im" => m.loss_weights.im = parse_value(key, value)?,
            "model.loss_weight.tem" => m.loss_weights.tem = parse_value(key, value)?,
            "model.weighted_loss" => m.weighted_loss = parse_bool(key, value)?,
            "model.smil" => m.smil = parse_bool(key, value)?,
            "model.fusion" => m.fusion = parse_value(key, value)?,
            "model.modalities" => m.modalities = parse_value(key, value)?,
            "model.detach_weights" => m.detach_weights = parse_bool(key, value)?,
            "model.output_projection" => m.output_projection = parse_bool(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.lr0" => t.lr0 = parse_value(key, value)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "cv.folds" => self.folds = parse_value(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(CmusError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CmusError::Config(format!("line {}: expected key=value, got '{line}'", n + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CmusError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            pairs.push((n + 1, k.to_string(), v.to_string()));
        }
        // Task-replacing keys go first so the remaining keys refine them.
        pairs.sort_by_key(|(_, k, _)| match k.as_str() {
            "task.preset" => 0,
            "task.manifest" => 1,
            _ => 2,
        });
        let mut cfg = ExperimentConfig::default();
        for (n, k, v) in pairs {
            cfg.set(&k, &v).map_err(|e| match e {
                CmusError::Config(m) => CmusError::Config(format!("line {n}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting, one per line, in a fixed order. `parse(to_text())`
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        match &self.task {
            TaskSource::Manifest { path, seed } => {
                put("task.manifest", path.display().to_string());
                put("task.seed", seed.to_string());
            }
            TaskSource::Synthetic(t) => {
                put("task.classes", t.class_names.join(","));
                put("task.patients_per_class", t.patients_per_class.to_string());
                put("task.raw_dims.om", t.raw_dims.om.to_string());
                put("task.raw_dims.im", t.raw_dims.im.to_string());
                put("task.raw_dims.tem", t.raw_dims.tem.to_string());
                put("task.tokens", t.tokens.to_string());
                put("task.bag_min", t.bag_min.to_string());
                put("task.bag_max", t.bag_max.to_string());
                put("task.separability.om", t.separability.om.to_string());
                put("task.separability.im", t.separability.im.to_string());
                put("task.separability.tem", t.separability.tem.to_string());
                put("task.structure", structure_str(t.structure).to_string());
                put("task.patient_spread", t.patient_spread.to_string());
                put("task.instance_spread", t.instance_spread.to_string());
                put("task.outlier_rate", t.outlier_rate.to_string());
                put("task.outlier_scale", t.outlier_scale.to_string());
                put("task.seed", t.seed.to_string());
            }
        }
        let m = &self.model;
        put("model.dim", m.dim.to_string());
        put("model.heads", m.heads.to_string());
        put("model.threshold", m.threshold.to_string());
        put("model.loss_weight.om", m.loss_weights.om.to_string());
        put("model.loss_weight.im", m.loss_weights.im.to_string());
        put("model.loss_weight.tem", m.loss_weights.tem.to_string());
        put("model.weighted_loss", m.weighted_loss.to_string());
        put("model.smil", m.smil.to_string());
        put("model.fusion", m.fusion.as_str().to_string());
        put("model.modalities", m.modalities.to_string());
        put("model.detach_weights", m.detach_weights.to_string());
        put("model.output_projection", m.output_projection.to_string());
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr0", t.lr0.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.seed", t.seed.to_string());
        put("cv.folds", self.folds.to_string());
        put("output.dir", self.output_dir.display().to_string());
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmusError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CmusError::io(path, e))
    }
}

fn set_task(spec: &mut TaskSpec, key: &str, rest: &str, value: &str) -> Result<()> {
    let sep: &mut Separability = &mut spec.separability;
    match rest {
        "classes" => {
            spec.class_names = value.split(',').map(|c| c.trim().to_string()).collect();
            if spec.class_names.iter().any(String::is_empty) {
                return Err(CmusError::Config("empty class name in task.classes".into()));
            }
        }
        "patients_per_class" => spec.patients_per_class = parse_value(key, value)?,
        "raw_dims.om" => spec.raw_dims.om = parse_value(key, value)?,
        "raw_dims.im" => spec.raw_dims.im = parse_value(key, value)?,
        "raw_dims.tem" => spec.raw_dims.tem = parse_value(key, value)?,
        "tokens" => spec.tokens = parse_value(key, value)?,
        "bag_min" => spec.bag_min = parse_value(key, value)?,
        "bag_max" => spec.bag_max = parse_value(key, value)?,
        "separability.om" => sep.om = parse_value(key, value)?,
        "separability.im" => sep.im = parse_value(key, value)?,
        "separability.tem" => sep.tem = parse_value(key, value)?,
        "structure" => spec.structure = parse_structure(value)?,
        "patient_spread" => spec.patient_spread = parse_value(key, value)?,
        "instance_spread" => spec.instance_spread = parse_value(key, value)?,
        "outlier_rate" => spec.outlier_rate = parse_value(key, value)?,
        "outlier_scale" => spec.outlier_scale = parse_value(key, value)?,
        _ => return Err(CmusError::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}
