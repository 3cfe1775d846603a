//! PGD and square-attack feasibility on a quickly trained model: the
//! epsilon-growth curve and the gradient-based vs gradient-free comparison.
//!
//! ```bash
//! cargo run --release --example pgd_attack_demo
//! ```

use partrobust::attacks::{linf_distance, pgd_attack, AttackConfig};
use partrobust::datagen::{generate_dataset, DatasetSpec};
use partrobust::evalreport::{evaluate, EvalConfig};
use partrobust::losses::{LossConfig, LossKind};
use partrobust::models::{HeadKind, ModelConfig};
use partrobust::trainer::{train, TrainConfig};

fn main() {
    let spec = DatasetSpec {
        classes: 4,
        parts: 4,
        n_train: 768,
        n_val: 128,
        n_test: 128,
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
            kind: LossKind::PgdAdv,
            c_seg: 0.5,
            ..LossConfig::default()
        },
        lr0: 0.05,
        batch_size: 64,
        pretrain_epochs: 3,
        train_epochs: 3,
        eval_attack: AttackConfig::training(8.0 / 255.0),
        val_adv_subset: Some(64),
        ..TrainConfig::default()
    };
    println!("training a small part model to attack...");
    let (ckpt, _) = train(&cfg, &data).unwrap();

    println!("\nfeasibility: every adversarial output stays in the ball and in [0,1]");
    let sample = &data.test[0];
    let attack = AttackConfig {
        epsilon: 8.0 / 255.0,
        iterations: 20,
        restarts: 2,
        ..AttackConfig::default()
    };
    let out = pgd_attack(
        &ckpt.params,
        &cfg.model,
        &sample.x,
        sample.y,
        Some(&sample.mask),
        &attack,
        42,
    )
    .unwrap();
    for (i, r) in out.restarts.iter().enumerate() {
        println!(
            "  restart {i}: linf distance {:.6} (eps {:.6}), objective {:.4}",
            linf_distance(&r.x_adv, &sample.x),
            attack.epsilon,
            r.objective
        );
    }

    println!("\nepsilon growth (accuracy should fall toward zero):");
    for eps_numer in [0, 2, 4, 8, 16] {
        let eps = eps_numer as f64 / 255.0;
        let eval_cfg = EvalConfig {
            attack: AttackConfig {
                epsilon: eps,
                iterations: 20,
                restarts: 2,
                ..AttackConfig::default()
            },
            subset: Some(64),
            ..EvalConfig::default()
        };
        let (m, _) = evaluate(&ckpt.params, &cfg.model, &data.test, &eval_cfg).unwrap();
        println!("  eps {eps_numer:2}/255: clean {:.3}, adversarial {:.3}", m.clean_acc, m.adv_acc);
    }

    println!("\ngradient-free square attack vs PGD at eps 8/255:");
    let pgd_cfg = EvalConfig {
        attack: AttackConfig {
            iterations: 20,
            restarts: 2,
            ..AttackConfig::default()
        },
        subset: Some(64),
        ..EvalConfig::default()
    };
    let square_cfg = EvalConfig {
        attack: AttackConfig {
            iterations: 0,
            restarts: 1,
            random_init: false,
            ..AttackConfig::default()
        },
        use_square: true,
        square_iterations: 150,
        subset: Some(64),
        ..EvalConfig::default()
    };
    let (pgd_m, _) = evaluate(&ckpt.params, &cfg.model, &data.test, &pgd_cfg).unwrap();
    let (sq_m, _) = evaluate(&ckpt.params, &cfg.model, &data.test, &square_cfg).unwrap();
    println!(
        "  PGD adversarial accuracy {:.3} <= square adversarial accuracy {:.3} (gradients work)",
        pgd_m.adv_acc, sq_m.adv_acc
    );
}
