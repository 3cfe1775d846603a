//! Training objectives: the combined segmentation-classification loss, its
//! adversarial version, and the TRADES trade-off loss.
//!
//! All three weight classification against segmentation with
//! `c_seg in [0,1]`. The adversarial loss evaluates both terms at an input
//! maximizing the classification loss alone; TRADES keeps the
//! classification term clean, evaluates the segmentation term at an input
//! maximizing the KL to the clean prediction, and adds that KL weighted by
//! beta. Samples without a segmentation label contribute a zero
//! segmentation term.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig, AttackObjective};
use crate::datagen::Sample;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{model_forward, HeadKind, ModelConfig, ModelParams};
use crate::partfeat::SegLogits;

/// Which objective trains the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Normal,
    PgdAdv,
    Trades,
}

/// Loss weights and the inner-maximization attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub c_seg: f64,
    /// TRADES only.
    pub beta: f64,
    /// Inner maximization budget; the objective field is ignored (the loss
    /// kind fixes it: classification for adversarial, KL for TRADES).
    pub attack: AttackConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Normal,
            c_seg: 0.5,
            beta: 1.0,
            attack: AttackConfig::training(8.0 / 255.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c_seg) {
            return Err(Error::config(format!("c_seg {} outside [0,1]", self.c_seg)));
        }
        if self.beta < 0.0 {
            return Err(Error::config(format!("beta {} negative", self.beta)));
        }
        if model.head == HeadKind::Baseline && self.c_seg != 0.0 {
            return Err(Error::config(
                "the baseline has no segmenter output; set c_seg = 0",
            ));
        }
        self.attack.validate()
    }
}

/// Mean over pixels of the per-pixel channel cross-entropy against the
/// mask's channel indices.
pub fn seg_cross_entropy(g: &mut Graph, seg: SegLogits, mask: Arc<Vec<u8>>) -> Result<Var> {
    g.pixelwise_cross_entropy(seg.logits, mask)
}

/// Loss value split into its components. `grads` is aligned with
/// `ModelParams::entries()` order when requested.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub cls: f64,
    pub seg: f64,
    pub kl: f64,
    pub grads: Option<Vec<Tensor>>,
}

impl LossEval {
    pub fn components(&self) -> String {
        format!(
            "total {:.6}, cls {:.6}, seg {:.6}, kl {:.6}",
            self.total, self.cls, self.seg, self.kl
        )
    }
}

struct GraphLoss {
    total: Var,
    cls: f64,
    seg: f64,
    kl: f64,
}

/// `(1-c) L_cls(x_cls) + c L_seg(x_seg)` on one graph. The two inputs may
/// differ (TRADES evaluates them at different points).
#[allow(clippy::too_many_arguments)]
fn combined_on_graph(
    g: &mut Graph,
    params_bound: &crate::models::BoundParams,
    model_cfg: &ModelConfig,
    sample: &Sample,
    x_cls: Var,
    x_seg: Var,
    c_seg: f64,
    kl_beta: Option<(f64, Var)>,
) -> Result<GraphLoss> {
    let out_cls = model_forward(g, x_cls, params_bound, model_cfg)?;
    let cls = g.cross_entropy(out_cls.class_logits, sample.y)?;
    let cls_value = g.value(cls).item();

    let use_seg = c_seg > 0.0 && sample.has_seg_label && model_cfg.head != HeadKind::Baseline;
    let (seg_term, seg_value) = if use_seg {
        let seg_out = if x_seg == x_cls {
            out_cls.seg.expect("part model emits segmentation")
        } else {
            let out_seg = model_forward(g, x_seg, params_bound, model_cfg)?;
            out_seg.seg.expect("part model emits segmentation")
        };
        let seg_ce = seg_cross_entropy(g, seg_out, sample.mask.clone())?;
        (Some(seg_ce), g.value(seg_ce).item())
    } else {
        (None, 0.0)
    };

    let weighted_cls = g.scale(cls, 1.0 - c_seg)?;
    let mut total = match seg_term {
        Some(seg) => {
            let weighted_seg = g.scale(seg, c_seg)?;
            g.add(weighted_cls, weighted_seg)?
        }
        None => weighted_cls,
    };

    let mut kl_value = 0.0;
    if let Some((beta, x_adv)) = kl_beta {
        let out_adv = model_forward(g, x_adv, params_bound, model_cfg)?;
        let kl = g.kl_divergence(out_cls.class_logits, out_adv.class_logits)?;
        kl_value = g.value(kl).item();
        let weighted_kl = g.scale(kl, beta)?;
        total = g.add(total, weighted_kl)?;
    }

    Ok(GraphLoss {
        total,
        cls: cls_value,
        seg: seg_value,
        kl: kl_value,
    })
}

fn finish(g: &mut Graph, params: &ModelParams, bound: &crate::models::BoundParams, gl: GraphLoss, with_grads: bool) -> Result<LossEval> {
    let total = g.value(gl.total).item();
    if !total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {total}")));
    }
    let grads = if with_grads {
        g.backward(gl.total)?;
        let mut out = Vec::with_capacity(params.entries().len());
        for (name, tensor) in params.entries() {
            let var = bound
                .vars()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v)
                .expect("bound param");
            out.push(
                g.grad(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec())),
            );
        }
        Some(out)
    } else {
        None
    };
    Ok(LossEval {
        total,
        cls: gl.cls,
        seg: gl.seg,
        kl: gl.kl,
        grads,
    })
}

/// `(1 - c_seg) L_cls(x) + c_seg L_seg(x)` on the clean input.
pub fn normal_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &Sample,
    with_grads: bool,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let xv = g.leaf(sample.x.clone(), false);
    let bound = params.bind(&mut g, with_grads);
    let gl = combined_on_graph(
        &mut g,
        &bound,
        model_cfg,
        sample,
        xv,
        xv,
        loss_cfg.c_seg,
        None,
    )?;
    finish(&mut g, params, &bound, gl, with_grads)
}

/// Adversarial loss: both terms evaluated at the input maximizing the
/// classification loss alone.
pub fn adv_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &Sample,
    with_grads: bool,
    attack_seed: u64,
) -> Result<LossEval> {
    let attack = AttackConfig {
        objective: AttackObjective::Cls,
        ..loss_cfg.attack.clone()
    };
    let outcome = pgd_attack(
        params,
        model_cfg,
        &sample.x,
        sample.y,
        Some(&sample.mask),
        &attack,
        attack_seed,
    )?;
    let mut g = Graph::new();
    let xv = g.leaf(outcome.best().clone(), false);
    let bound = params.bind(&mut g, with_grads);
    let gl = combined_on_graph(
        &mut g,
        &bound,
        model_cfg,
        sample,
        xv,
        xv,
        loss_cfg.c_seg,
        None,
    )?;
    finish(&mut g, params, &bound, gl, with_grads)
}

/// TRADES: clean classification term, adversarial segmentation term, plus
/// beta times the KL between clean and adversarial predictions; the inner
/// maximization targets that KL.
pub fn trades_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &Sample,
    with_grads: bool,
    attack_seed: u64,
) -> Result<LossEval> {
    let attack = AttackConfig {
        objective: AttackObjective::Kl,
        ..loss_cfg.attack.clone()
    };
    let outcome = pgd_attack(
        params,
        model_cfg,
        &sample.x,
        sample.y,
        Some(&sample.mask),
        &attack,
        attack_seed,
    )?;
    let mut g = Graph::new();
    let x_clean = g.leaf(sample.x.clone(), false);
    let x_adv = g.leaf(outcome.best().clone(), false);
    let bound = params.bind(&mut g, with_grads);
    let gl = combined_on_graph(
        &mut g,
        &bound,
        model_cfg,
        sample,
        x_clean,
        x_adv,
        loss_cfg.c_seg,
        Some((loss_cfg.beta, x_adv)),
    )?;
    finish(&mut g, params, &bound, gl, with_grads)
}

/// Dispatches on the configured loss kind.
pub fn sample_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &Sample,
    with_grads: bool,
    attack_seed: u64,
) -> Result<LossEval> {
    match loss_cfg.kind {
        LossKind::Normal => normal_loss(params, model_cfg, loss_cfg, sample, with_grads),
        LossKind::PgdAdv => adv_loss(params, model_cfg, loss_cfg, sample, with_grads, attack_seed),
        LossKind::Trades => {
            trades_loss(params, model_cfg, loss_cfg, sample, with_grads, attack_seed)
        }
    }
}
