//! Adversarially train a small part model end to end and watch the
//! history: clean pretraining, then PGD training under a cosine schedule
//! with per-epoch validation adversarial accuracy.
//!
//! ```bash
//! cargo run --release --example train_part_model
//! ```

use partrobust::attacks::AttackConfig;
use partrobust::datagen::{generate_dataset, DatasetSpec};
use partrobust::evalreport::{evaluate, EvalConfig};
use partrobust::losses::{LossConfig, LossKind};
use partrobust::models::{HeadKind, ModelConfig};
use partrobust::trainer::{train, TrainConfig};

fn main() {
    let spec = DatasetSpec {
        classes: 4,
        parts: 4,
        n_train: 1024,
        n_val: 128,
        n_test: 256,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let eps = 8.0 / 255.0;
    let cfg = TrainConfig {
        model: ModelConfig {
            classes: 4,
            parts: 4,
            head: HeadKind::Downsampled,
            width_base: 8,
            ..ModelConfig::default()
        },
        loss: LossConfig {
            kind: LossKind::PgdAdv,
            c_seg: 0.5,
            ..LossConfig::default()
        },
        lr0: 0.05,
        batch_size: 64,
        pretrain_epochs: 3,
        train_epochs: 5,
        eval_attack: AttackConfig::training(eps),
        val_adv_subset: Some(96),
        seed: 0,
        ..TrainConfig::default()
    };

    println!("training a downsampled part model with PGD adversarial training...");
    let started = std::time::Instant::now();
    let (checkpoint, history) = train(&cfg, &data).unwrap();
    for r in &history {
        println!(
            "  epoch {:2} [{}] loss {:.3} (cls {:.3}, seg {:.3})  val clean {:.3}  val adv {}  lr {:.4}",
            r.epoch,
            r.phase,
            r.train_loss,
            r.train_cls,
            r.train_seg,
            r.val_clean_acc,
            r.val_adv_acc
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            r.lr
        );
    }
    println!(
        "best epoch {} selected by validation adversarial accuracy ({:?})",
        checkpoint.meta.epoch, checkpoint.meta.val_adv_acc
    );

    let eval_cfg = EvalConfig {
        attack: AttackConfig {
            epsilon: eps,
            iterations: 40,
            restarts: 3,
            ..AttackConfig::default()
        },
        subset: Some(128),
        ..EvalConfig::default()
    };
    let (metrics, _) = evaluate(&checkpoint.params, &cfg.model, &data.test, &eval_cfg).unwrap();
    println!(
        "test ({} samples): clean {:.3}, adversarial {:.3}, seg pixel acc {:.3} clean / {:.3} adversarial",
        metrics.n_samples,
        metrics.clean_acc,
        metrics.adv_acc,
        metrics.seg_pixel_acc_clean.unwrap_or(f64::NAN),
        metrics.seg_pixel_acc_adv.unwrap_or(f64::NAN)
    );
    println!("total {:.0}s", started.elapsed().as_secs_f64());
}
