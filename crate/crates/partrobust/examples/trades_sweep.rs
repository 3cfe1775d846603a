//! Sweep the TRADES beta on a small model and print the accuracy-vs-
//! robustness frontier as CSV with Pareto flags.
//!
//! ```bash
//! cargo run --release --example trades_sweep
//! ```

use partrobust::attacks::AttackConfig;
use partrobust::datagen::{generate_dataset, DatasetSpec};
use partrobust::evalreport::{tradeoff_csv, tradeoff_report};
use partrobust::losses::{LossConfig, LossKind};
use partrobust::models::{HeadKind, ModelConfig};
use partrobust::trainer::{sweep, SweepGrid, TrainConfig};

fn main() {
    let spec = DatasetSpec {
        classes: 4,
        parts: 4,
        n_train: 768,
        n_val: 192,
        n_test: 128,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let base = TrainConfig {
        model: ModelConfig {
            classes: 4,
            parts: 4,
            head: HeadKind::Downsampled,
            width_base: 8,
            ..ModelConfig::default()
        },
        loss: LossConfig {
            kind: LossKind::Trades,
            c_seg: 0.5,
            beta: 1.0,
            ..LossConfig::default()
        },
        lr0: 0.05,
        batch_size: 64,
        pretrain_epochs: 3,
        train_epochs: 4,
        eval_attack: AttackConfig::training(8.0 / 255.0),
        val_adv_subset: Some(128),
        ..TrainConfig::default()
    };
    let grid = SweepGrid {
        beta: vec![0.1, 0.5, 2.0],
        ..SweepGrid::default()
    };
    println!("sweeping TRADES beta over {:?} (c_seg fixed at 0.5)...", grid.beta);
    let rows = sweep(&base, &grid, &data).unwrap();
    for r in &rows {
        println!(
            "  beta {:.2}: val clean {:.3}, val adversarial {:.3}",
            r.beta, r.clean_acc, r.adv_acc
        );
    }
    let tuples: Vec<(String, String, f64, f64, f64)> = rows
        .iter()
        .map(|r| {
            (
                format!("cell{}", r.index),
                "downsampled".to_string(),
                r.beta,
                r.clean_acc,
                r.adv_acc,
            )
        })
        .collect();
    let report = tradeoff_report(&tuples).unwrap();
    println!("\n{}", tradeoff_csv(&report));
}
