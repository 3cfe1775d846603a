use partrobust::attacks::AttackConfig;
use partrobust::datagen::{generate_dataset, DatasetSpec};
use partrobust::losses::{LossConfig, LossKind};
use partrobust::models::{HeadKind, ModelConfig};
use partrobust::trainer::{train, TrainConfig};

#[test]
#[ignore]
fn baseline_lr_sweep() {
    let spec = DatasetSpec { n_train: 2048, n_val: 256, n_test: 256, ..DatasetSpec::default() };
    let data = generate_dataset(&spec).unwrap();
    for lr in [0.1, 0.05, 0.02, 0.01, 0.003] {
        for wb in [8usize, 16] {
            let cfg = TrainConfig {
                model: ModelConfig { head: HeadKind::Baseline, width_base: wb, seed: 1, ..ModelConfig::default() },
                loss: LossConfig { kind: LossKind::Normal, c_seg: 0.0, ..LossConfig::default() },
                lr0: lr,
                batch_size: 64,
                pretrain_epochs: 8,
                train_epochs: 0,
                eval_attack: AttackConfig { iterations: 2, restarts: 1, ..AttackConfig::training(8.0/255.0) },
                val_adv_subset: Some(16),
                seed: 1,
                ..TrainConfig::default()
            };
            let (ckpt, history) = train(&cfg, &data).unwrap();
            let losses: Vec<String> = history.iter().map(|r| format!("{:.2}", r.train_loss)).collect();
            println!("lr {lr} w{wb}: best val_clean {:.3} | loss {}", ckpt.meta.val_clean_acc, losses.join(" "));
        }
    }
}
