//! The training protocol: clean pretraining, adversarial (or TRADES)
//! training under a cosine step schedule, per-epoch validation, early
//! stopping on validation adversarial accuracy, and hyperparameter sweeps.

mod checkpoint;
mod sweep;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState};
pub use sweep::{sweep, sweep_rows_jsonl, SweepGrid, SweepRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::datagen::{Dataset, Sample};
use crate::diffcore::{cosine_lr, Tensor};
use crate::error::{Error, Result};
use crate::evalreport::{clean_accuracy, evaluate, EvalConfig};
use crate::losses::{sample_loss, LossConfig, LossKind};
use crate::models::{init_params, HeadKind, ModelConfig, ModelParams};
use crate::seeds::{derive_seed, tags};

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Phase 1: epochs of the normal loss on clean inputs, constant lr0.
    pub pretrain_epochs: usize,
    /// Phase 2: epochs of the configured loss under the cosine schedule.
    pub train_epochs: usize,
    /// Validation-time attack (training-strength PGD by default).
    pub eval_attack: AttackConfig,
    /// Cap on validation samples used for the adversarial metric.
    pub val_adv_subset: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            pretrain_epochs: 15,
            train_epochs: 40,
            eval_attack: AttackConfig::training(8.0 / 255.0),
            val_adv_subset: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(&self.model)?;
        self.eval_attack.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("TrainConfig: batch_size must be >= 1"));
        }
        if self.lr0 < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("TrainConfig: negative optimizer setting"));
        }
        Ok(())
    }

    pub fn validate_against(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        let m = &self.model;
        let s = &data.spec;
        if m.classes != s.classes
            || m.parts != data.parts
            || m.height != s.height
            || m.width != s.width
        {
            return Err(Error::config(format!(
                "model (C={}, K={}, {}x{}) does not match dataset (C={}, K={}, {}x{})",
                m.classes, m.parts, m.height, m.width, s.classes, data.parts, s.height, s.width
            )));
        }
        Ok(())
    }
}

/// One history line per epoch, serialized as JSON-lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub train_cls: f64,
    pub train_seg: f64,
    pub train_kl: f64,
    pub val_clean_acc: f64,
    pub val_adv_acc: Option<f64>,
    pub lr: f64,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record encodes"))
        .collect::<Vec<_>>()
        .join("\n")
}

struct BatchStats {
    loss: f64,
    cls: f64,
    seg: f64,
    kl: f64,
}

/// Mean loss and gradient over one batch; per-sample work runs in parallel
/// and reduces in sample order, so results are thread-count independent.
fn batch_grads(
    params: &ModelParams,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    samples: &[(usize, &Sample)],
    epoch: usize,
    n_train: usize,
) -> Result<(BatchStats, Vec<Tensor>)> {
    let evals: Result<Vec<_>> = samples
        .par_iter()
        .map(|(index, sample)| {
            let attack_seed = derive_seed(
                cfg.seed,
                tags::ATTACK,
                (epoch * n_train + index) as u64,
            );
            sample_loss(params, &cfg.model, loss_cfg, sample, true, attack_seed)
        })
        .collect();
    let evals = evals?;
    let scale = 1.0 / samples.len() as f64;
    let mut grads: Vec<Tensor> = params
        .entries()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut stats = BatchStats {
        loss: 0.0,
        cls: 0.0,
        seg: 0.0,
        kl: 0.0,
    };
    for eval in &evals {
        stats.loss += eval.total * scale;
        stats.cls += eval.cls * scale;
        stats.seg += eval.seg * scale;
        stats.kl += eval.kl * scale;
        for (acc, g) in grads.iter_mut().zip(eval.grads.as_ref().expect("grads")) {
            acc.add_assign(g);
        }
    }
    for g in grads.iter_mut() {
        g.scale_in_place(scale);
    }
    Ok((stats, grads))
}

fn val_adv_accuracy(
    params: &ModelParams,
    cfg: &TrainConfig,
    val: &[Sample],
) -> Result<f64> {
    let eval_cfg = EvalConfig {
        attack: cfg.eval_attack.clone(),
        use_square: false,
        square_iterations: 0,
        subset: cfg.val_adv_subset,
    };
    let (metrics, _) = evaluate(params, &cfg.model, val, &eval_cfg)?;
    Ok(metrics.adv_acc)
}

/// Trains per the two-phase protocol and returns the best checkpoint (by
/// validation adversarial accuracy, earliest epoch winning ties) plus the
/// full history. Deterministic given the config and data.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate_against(data)?;
    let mut params = init_params(&cfg.model)?;
    let n_train = data.train.len();
    if n_train == 0 || data.val.is_empty() {
        return Err(Error::config("train: empty train or val split"));
    }
    let batches_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_phase2_steps = (cfg.train_epochs * batches_per_epoch).max(1);

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(Checkpoint, f64)> = None;
    let mut phase2_step = 0usize;

    let pretrain_loss = LossConfig {
        kind: LossKind::Normal,
        ..cfg.loss.clone()
    };

    for epoch in 0..cfg.pretrain_epochs + cfg.train_epochs {
        let pretraining = epoch < cfg.pretrain_epochs;
        let loss_cfg = if pretraining { &pretrain_loss } else { &cfg.loss };
        let epoch_lr = if pretraining {
            cfg.lr0
        } else {
            cosine_lr(phase2_step, total_phase2_steps, cfg.lr0)?
        };

        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags::SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_stats = BatchStats {
            loss: 0.0,
            cls: 0.0,
            seg: 0.0,
            kl: 0.0,
        };
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = if pretraining {
                cfg.lr0
            } else {
                let lr = cosine_lr(phase2_step, total_phase2_steps, cfg.lr0)?;
                phase2_step += 1;
                lr
            };
            let batch: Vec<(usize, &Sample)> =
                chunk.iter().map(|&i| (i, &data.train[i])).collect();
            let (stats, grads) = batch_grads(&params, cfg, loss_cfg, &batch, epoch, n_train)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        components: msg,
                    },
                    other => other,
                })?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    components: format!(
                        "total {}, cls {}, seg {}, kl {}",
                        stats.loss, stats.cls, stats.seg, stats.kl
                    ),
                });
            }
            params.sgd_step(&grads, lr, cfg.momentum, cfg.weight_decay)?;
            let w = chunk.len() as f64 / n_train as f64;
            epoch_stats.loss += stats.loss * w;
            epoch_stats.cls += stats.cls * w;
            epoch_stats.seg += stats.seg * w;
            epoch_stats.kl += stats.kl * w;
        }

        let val_clean = clean_accuracy(&params, &cfg.model, &data.val)?;
        let val_adv = if pretraining {
            None
        } else {
            Some(val_adv_accuracy(&params, cfg, &data.val)?)
        };

        history.push(EpochRecord {
            epoch,
            phase: if pretraining { "pretrain" } else { "adversarial" }.to_string(),
            train_loss: epoch_stats.loss,
            train_cls: epoch_stats.cls,
            train_seg: epoch_stats.seg,
            train_kl: epoch_stats.kl,
            val_clean_acc: val_clean,
            val_adv_acc: val_adv,
            lr: epoch_lr,
        });

        // Selection score: adversarial accuracy once phase 2 reports it,
        // clean accuracy otherwise (covers train_epochs = 0 runs). Strict
        // improvement keeps the earliest epoch on ties.
        let score = val_adv.unwrap_or(if cfg.train_epochs == 0 { val_clean } else { -1.0 });
        let improved = match &best {
            None => true,
            Some((_, best_score)) => score > *best_score,
        };
        if improved {
            best = Some((
                Checkpoint {
                    meta: CheckpointMeta {
                        config: cfg.clone(),
                        epoch,
                        best_val_adv_acc: val_adv,
                        val_clean_acc: val_clean,
                        val_adv_acc: val_adv,
                        rng: RngState {
                            train_seed: cfg.seed,
                            epochs_done: epoch + 1,
                        },
                    },
                    params: params.clone(),
                },
                score,
            ));
        }
    }

    let (checkpoint, _) = best.ok_or_else(|| Error::config("train: zero epochs configured"))?;
    Ok((checkpoint, history))
}

/// Re-evaluates a checkpoint's validation metrics with its own recorded
/// config; used to verify the serialization contract.
pub fn revalidate(checkpoint: &Checkpoint, data: &Dataset) -> Result<(f64, Option<f64>)> {
    let cfg = &checkpoint.meta.config;
    let clean = clean_accuracy(&checkpoint.params, &cfg.model, &data.val)?;
    let adv = if checkpoint.meta.val_adv_acc.is_some() {
        Some(val_adv_accuracy(&checkpoint.params, cfg, &data.val)?)
    } else {
        None
    };
    Ok((clean, adv))
}
