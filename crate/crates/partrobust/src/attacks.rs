//! L-infinity attacks against frozen models: PGD with a selectable
//! objective (classification, combined classification+segmentation, KL for
//! TRADES training) and a gradient-free random square-patch attack used as
//! a gradient-obfuscation sanity check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::seg_cross_entropy;
use crate::models::{model_forward, ModelConfig, ModelParams};

/// What the attacker maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Classification cross-entropy.
    Cls,
    /// `(1-c) L_cls + c L_seg` on the attacked input.
    Combined { c_seg: f64 },
    /// KL between the clean prediction and the attacked one.
    Kl,
}

/// Attack budget and schedule. `step_size <= 0` means "epsilon / 10".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity radius in [0,1] pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub objective: AttackObjective,
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        // Desk-scale evaluation attack: 40 iterations, step eps/10, 3
        // restarts (scaled down from 100-iteration, 5-restart full runs).
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 0.0,
            iterations: 40,
            restarts: 3,
            objective: AttackObjective::Cls,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.epsilon > 1.0 {
            return Err(Error::config(format!(
                "AttackConfig: epsilon {} outside [0,1]",
                self.epsilon
            )));
        }
        if self.restarts == 0 {
            return Err(Error::config("AttackConfig: restarts must be >= 1"));
        }
        if let AttackObjective::Combined { c_seg } = self.objective {
            if !(0.0..=1.0).contains(&c_seg) {
                return Err(Error::config(format!(
                    "AttackConfig: attack c_seg {c_seg} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn effective_step(&self) -> f64 {
        if self.step_size > 0.0 {
            self.step_size
        } else {
            self.epsilon / 10.0
        }
    }

    /// Training-time attack: 10 steps of eps/4 (the 2/255 step at eps=8/255,
    /// rescaled with eps), one restart, random init.
    pub fn training(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            iterations: 10,
            restarts: 1,
            objective: AttackObjective::Cls,
            random_init: true,
            seed: 0,
        }
    }
}

/// One restart's final input and achieved objective value.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub x_adv: Tensor,
    pub objective: f64,
}

/// All restarts plus the best one (highest objective).
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub restarts: Vec<RestartOutcome>,
    pub best_index: usize,
}

impl AttackOutcome {
    pub fn best(&self) -> &Tensor {
        &self.restarts[self.best_index].x_adv
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(x_adv: &mut [f64], x: &[f64], epsilon: f64) {
    for (a, &orig) in x_adv.iter_mut().zip(x) {
        *a = a.clamp((orig - epsilon).max(0.0), (orig + epsilon).min(1.0));
    }
}

/// Builds the attack objective on `g` for input `xv`, returning the scalar.
fn objective_on_graph(
    g: &mut Graph,
    xv: Var,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    y: usize,
    mask: Option<&std::sync::Arc<Vec<u8>>>,
    clean_logits: Option<&Tensor>,
    objective: AttackObjective,
) -> Result<Var> {
    let bound = params.bind(g, false);
    let out = model_forward(g, xv, &bound, model_cfg)?;
    match objective {
        AttackObjective::Cls => g.cross_entropy(out.class_logits, y),
        AttackObjective::Combined { c_seg } => {
            let cls = g.cross_entropy(out.class_logits, y)?;
            let seg = out.seg.ok_or_else(|| {
                Error::usage("combined attack objective needs a part model")
            })?;
            let mask = mask.ok_or_else(|| {
                Error::usage("combined attack objective needs the ground-truth mask")
            })?;
            let seg_ce = seg_cross_entropy(g, seg, mask.clone())?;
            let a = g.scale(cls, 1.0 - c_seg)?;
            let b = g.scale(seg_ce, c_seg)?;
            g.add(a, b)
        }
        AttackObjective::Kl => {
            let clean = clean_logits
                .ok_or_else(|| Error::usage("kl attack objective needs clean logits"))?;
            let p = g.leaf(clean.clone(), false);
            g.kl_divergence(p, out.class_logits)
        }
    }
}

/// Objective value and its gradient w.r.t. the input.
fn objective_grad(
    x: &Tensor,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    y: usize,
    mask: Option<&std::sync::Arc<Vec<u8>>>,
    clean_logits: Option<&Tensor>,
    objective: AttackObjective,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = objective_on_graph(&mut g, xv, params, model_cfg, y, mask, clean_logits, objective)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grad = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((value, grad))
}

fn objective_value(
    x: &Tensor,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    y: usize,
    mask: Option<&std::sync::Arc<Vec<u8>>>,
    clean_logits: Option<&Tensor>,
    objective: AttackObjective,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let loss = objective_on_graph(&mut g, xv, params, model_cfg, y, mask, clean_logits, objective)?;
    Ok(g.value(loss).item())
}

/// Clean class logits with frozen parameters (no gradient bookkeeping).
pub fn forward_logits(
    x: &Tensor,
    params: &ModelParams,
    model_cfg: &ModelConfig,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let bound = params.bind(&mut g, false);
    let out = model_forward(&mut g, xv, &bound, model_cfg)?;
    let logits = g.value(out.class_logits).clone();
    let seg = out.seg.map(|s| g.value(s.logits).clone());
    Ok((logits, seg))
}

/// Projected gradient descent in the L-infinity ball of radius
/// `cfg.epsilon` around `x`, intersected with [0,1]. Runs every restart and
/// returns them all; the best restart maximizes the objective. `seed` is
/// the per-sample stream seed (derive it from the attack seed and the
/// sample index so parallel runs stay order-independent).
pub fn pgd_attack(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    x: &Tensor,
    y: usize,
    mask: Option<&std::sync::Arc<Vec<u8>>>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let step = cfg.effective_step();
    let clean_logits = if cfg.objective == AttackObjective::Kl {
        Some(forward_logits(x, params, model_cfg)?.0)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut restarts = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let mut x_adv = x.clone();
        if cfg.random_init {
            for v in x_adv.data_mut() {
                *v += rng.gen_range(-1.0..1.0) * cfg.epsilon;
            }
            project(x_adv.data_mut(), x.data(), cfg.epsilon);
        }
        for _ in 0..cfg.iterations {
            let (_, grad) = objective_grad(
                &x_adv,
                params,
                model_cfg,
                y,
                mask,
                clean_logits.as_ref(),
                cfg.objective,
            )?;
            for (v, &gv) in x_adv.data_mut().iter_mut().zip(grad.data()) {
                *v += step * sign(gv);
            }
            project(x_adv.data_mut(), x.data(), cfg.epsilon);
        }
        let objective = objective_value(
            &x_adv,
            params,
            model_cfg,
            y,
            mask,
            clean_logits.as_ref(),
            cfg.objective,
        )?;
        restarts.push(RestartOutcome { x_adv, objective });
    }
    let best_index = restarts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(AttackOutcome {
        restarts,
        best_index,
    })
}

/// Gradient-free random search: square patches of +-epsilon perturbation,
/// side annealed from H/2 down to 1, keeping a candidate only when it
/// strictly increases the classification loss. Uses model scores only.
pub fn square_random_attack(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_adv = x.clone();
    let mut best = objective_value(&x_adv, params, model_cfg, y, None, None, AttackObjective::Cls)?;
    if cfg.epsilon > 0.0 {
        for t in 0..cfg.iterations {
            let frac = 1.0 - t as f64 / cfg.iterations.max(1) as f64;
            let side = (((h / 2) as f64 * frac).round() as usize).clamp(1, h.min(w));
            let r0 = rng.gen_range(0..=h - side);
            let c0 = rng.gen_range(0..=w - side);
            let signs: Vec<f64> = (0..3).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut cand = x_adv.clone();
            for ch in 0..3 {
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        let idx = ch * h * w + r * w + c;
                        cand.data_mut()[idx] =
                            (x.data()[idx] + signs[ch] * cfg.epsilon).clamp(0.0, 1.0);
                    }
                }
            }
            project(cand.data_mut(), x.data(), cfg.epsilon);
            let value =
                objective_value(&cand, params, model_cfg, y, None, None, AttackObjective::Cls)?;
            if value > best {
                best = value;
                x_adv = cand;
            }
        }
    }
    Ok(AttackOutcome {
        restarts: vec![RestartOutcome {
            x_adv,
            objective: best,
        }],
        best_index: 0,
    })
}

/// Max |x_adv - x| over all coordinates.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}
