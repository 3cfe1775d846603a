//! Hyperparameter grid sweeps over (lr0, weight_decay) and then c_seg or
//! the TRADES beta.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::Result;
use crate::trainer::{train, TrainConfig};

/// Grid axes. Empty axes keep the base config's value; the cell order is
/// the cartesian product in (lr0, weight_decay, c_seg, beta, seed) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub lr0: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub c_seg: Vec<f64>,
    pub beta: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Optional (pretrain_epochs, train_epochs) override for cheaper cells.
    pub reduced_epochs: Option<(usize, usize)>,
}

/// One trained cell. `clean_acc`/`adv_acc` are the best checkpoint's
/// validation metrics; `error` is set when the cell failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub c_seg: f64,
    pub beta: f64,
    pub seed: u64,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub error: Option<String>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Enumerates the grid's concrete configs in deterministic cell order.
pub fn grid_cells(base: &TrainConfig, grid: &SweepGrid) -> Vec<TrainConfig> {
    let lrs = axis(&grid.lr0, base.lr0);
    let wds = axis(&grid.weight_decay, base.weight_decay);
    let csegs = axis(&grid.c_seg, base.loss.c_seg);
    let betas = axis(&grid.beta, base.loss.beta);
    let seeds = axis(&grid.seeds, base.seed);
    let mut cells = Vec::new();
    for &lr0 in &lrs {
        for &wd in &wds {
            for &c_seg in &csegs {
                for &beta in &betas {
                    for &seed in &seeds {
                        let mut cfg = base.clone();
                        cfg.lr0 = lr0;
                        cfg.weight_decay = wd;
                        cfg.loss.c_seg = c_seg;
                        cfg.loss.beta = beta;
                        cfg.seed = seed;
                        cfg.model.seed = seed;
                        if let Some((pre, adv)) = grid.reduced_epochs {
                            cfg.pretrain_epochs = pre;
                            cfg.train_epochs = adv;
                        }
                        cells.push(cfg);
                    }
                }
            }
        }
    }
    cells
}

/// Trains every cell; a failed cell records its error and the sweep moves
/// on. Rows come back in cell order regardless of execution details.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, data: &Dataset) -> Result<Vec<SweepRow>> {
    let cells = grid_cells(base, grid);
    let mut rows = Vec::with_capacity(cells.len());
    for (index, cfg) in cells.iter().enumerate() {
        let row = match train(cfg, data) {
            Ok((ckpt, _)) => SweepRow {
                index,
                lr0: cfg.lr0,
                weight_decay: cfg.weight_decay,
                c_seg: cfg.loss.c_seg,
                beta: cfg.loss.beta,
                seed: cfg.seed,
                clean_acc: ckpt.meta.val_clean_acc,
                adv_acc: ckpt.meta.val_adv_acc.unwrap_or(f64::NAN),
                error: None,
            },
            Err(e) => SweepRow {
                index,
                lr0: cfg.lr0,
                weight_decay: cfg.weight_decay,
                c_seg: cfg.loss.c_seg,
                beta: cfg.loss.beta,
                seed: cfg.seed,
                clean_acc: f64::NAN,
                adv_acc: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_rows_jsonl(rows: &[SweepRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row encodes"))
        .collect::<Vec<_>>()
        .join("\n")
}
