//! The generalized-robustness benchmarks on a quickly trained model:
//! common corruptions by kind and severity, background swapping, and
//! texture swapping (shape bias).
//!
//! ```bash
//! cargo run --release --example robustness_benchmarks
//! ```

use partrobust::attacks::AttackConfig;
use partrobust::datagen::{generate_dataset, DatasetSpec};
use partrobust::evalreport::benchmark_eval;
use partrobust::losses::{LossConfig, LossKind};
use partrobust::models::{HeadKind, ModelConfig};
use partrobust::trainer::{train, TrainConfig};

fn main() {
    let spec = DatasetSpec {
        classes: 4,
        parts: 4,
        n_train: 1024,
        n_val: 128,
        n_test: 192,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            classes: 4,
            parts: 4,
            head: HeadKind::Downsampled,
            width_base: 8,
            ..ModelConfig::default()
        },
        loss: LossConfig {
            kind: LossKind::Normal,
            c_seg: 0.5,
            ..LossConfig::default()
        },
        lr0: 0.05,
        batch_size: 64,
        pretrain_epochs: 8,
        train_epochs: 0,
        eval_attack: AttackConfig::training(8.0 / 255.0),
        val_adv_subset: Some(32),
        ..TrainConfig::default()
    };
    println!("training a part model on clean data...");
    let (ckpt, _) = train(&cfg, &data).unwrap();

    let table = benchmark_eval(&ckpt.params, &cfg.model, &data.test, spec.classes, 17).unwrap();
    println!("\ncorruption accuracy by kind and severity (seed {}):", table.seed);
    let mut by_kind: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for (kind, _, acc) in &table.corruption {
        by_kind.entry(kind.name()).or_default().push(*acc);
    }
    for (kind, accs) in by_kind {
        let cells: Vec<String> = accs.iter().map(|a| format!("{a:.2}")).collect();
        println!("  {kind:>15}: {}", cells.join(" "));
    }
    println!("  corruption mean: {:.3}", table.corruption_mean);
    println!("\nbackground-swap accuracy: {:.3}", table.background_swap_acc);
    println!("shape-bias (texture-swap) accuracy: {:.3}", table.shape_bias_acc);
}
