//! The single JSON run configuration: schema, defaults, dotted-path
//! overrides, and resolution into the typed configs the pipeline consumes.
//!
//! Unknown keys are rejected everywhere. Every field has a default, so an
//! empty object `{}` is a valid config; `resolved_config.json` materializes
//! all of them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::datagen::{DatasetSpec, LabelMode};
use crate::error::{Error, Result};
use crate::evalreport::EvalConfig;
use crate::losses::{LossConfig, LossKind};
use crate::models::ModelConfig;
use crate::trainer::{SweepGrid, TrainConfig};

/// Loss weights without the attack subtree (the `attack` section supplies
/// the inner maximization settings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: LossKind,
    pub c_seg: f64,
    pub beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: LossKind::Normal,
            c_seg: 0.5,
            beta: 1.0,
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub val_adv_subset: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            pretrain_epochs: 15,
            train_epochs: 40,
            val_adv_subset: Some(256),
        }
    }
}

/// Evaluation settings: attack, optional gradient-free attack, split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub attack: AttackConfig,
    pub use_square: bool,
    pub square_iterations: usize,
    pub subset: Option<usize>,
    /// Which split to evaluate: train, val, or test.
    pub split: String,
    /// Also run the corruption / background-swap / texture-swap benchmarks.
    pub benchmarks: bool,
    /// Path of the checkpoint to evaluate (defaults to the one `train`
    /// writes into the output directory).
    pub checkpoint: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            attack: AttackConfig::default(),
            use_square: false,
            square_iterations: 200,
            subset: None,
            split: "test".into(),
            benchmarks: false,
            checkpoint: None,
        }
    }
}

/// Optional label transform applied to the generated dataset before
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    /// none | part_bbox | object_seg | drop_fraction
    pub mode: String,
    /// Fraction of train samples keeping their segmentation label
    /// (drop_fraction mode only).
    pub fraction: f64,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            mode: "none".into(),
            fraction: 1.0,
        }
    }
}

impl LabelSection {
    pub fn label_mode(&self) -> Result<Option<LabelMode>> {
        match self.mode.as_str() {
            "none" => Ok(None),
            "part_bbox" => Ok(Some(LabelMode::PartBbox)),
            "object_seg" => Ok(Some(LabelMode::ObjectSeg)),
            "drop_fraction" => Ok(Some(LabelMode::DropFraction(self.fraction))),
            other => Err(Error::config(format!("unknown label mode {other}"))),
        }
    }
}

/// The whole run configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossSection,
    /// Training-time (inner maximization) attack.
    pub attack: AttackConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepGrid,
    pub labels: LabelSection,
    pub output_dir: String,
    /// When set, overrides the dataset, model, and training seeds at once.
    /// The PARTROBUST_SEED environment variable overrides this in turn.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parses a JSON document, applies `--set key=value` overrides (dotted
    /// paths, values parsed as JSON with a string fallback), then the
    /// optional seed override from the environment.
    pub fn from_json(text: &str, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config parse: {e}")))?;
        for entry in overrides {
            let (path, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set needs key=value, got {entry}")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("config validate: {e}")))?;
        if let Some(seed) = env_seed {
            cfg.seed = Some(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("read {}: {e}", path.display())))?;
        let env_seed = match std::env::var("PARTROBUST_SEED") {
            Ok(v) => Some(v.parse::<u64>().map_err(|e| {
                Error::config(format!("PARTROBUST_SEED must be an integer: {e}"))
            })?),
            Err(_) => None,
        };
        Self::from_json(&text, overrides, env_seed)
    }

    /// Seed-folded copies of the section configs.
    pub fn resolve(&self) -> Resolved {
        let mut dataset = self.dataset.clone();
        let mut model = self.model.clone();
        let mut seed = model.seed;
        if let Some(s) = self.seed {
            dataset.seed = s;
            model.seed = s;
            seed = s;
        }
        let train = TrainConfig {
            model,
            loss: LossConfig {
                kind: self.loss.kind,
                c_seg: self.loss.c_seg,
                beta: self.loss.beta,
                attack: self.attack.clone(),
            },
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            pretrain_epochs: self.train.pretrain_epochs,
            train_epochs: self.train.train_epochs,
            eval_attack: AttackConfig {
                seed,
                ..self.attack.clone()
            },
            val_adv_subset: self.train.val_adv_subset,
            seed,
        };
        let eval = EvalConfig {
            attack: self.eval.attack.clone(),
            use_square: self.eval.use_square,
            square_iterations: self.eval.square_iterations,
            subset: self.eval.subset,
        };
        Resolved {
            dataset,
            train,
            eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let resolved = self.resolve();
        resolved.train.validate()?;
        self.eval.attack.validate()?;
        self.labels.label_mode()?;
        match self.eval.split.as_str() {
            "train" | "val" | "test" => {}
            other => return Err(Error::config(format!("unknown eval split {other}"))),
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config encodes")
    }
}

/// The typed configs a command actually runs with.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn set_path(root: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if i == segments.len() - 1 {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(seg.to_string(), new);
                    return Ok(());
                }
                _ => return Err(Error::config(format!("--set path {path}: not an object"))),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => return Err(Error::config(format!("--set path {path}: not an object"))),
        };
    }
    Ok(())
}
