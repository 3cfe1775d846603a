//! SGD with momentum and a cosine learning-rate schedule.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// One SGD update on a single parameter tensor:
///
/// `v <- momentum * v + grad + weight_decay * param`
/// `param <- param - lr * v`
///
/// Weight decay is classic L2 folded into the gradient, not decoupled.
pub fn sgd_step(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::usage(format!("sgd_step: negative learning rate {lr}")));
    }
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::usage(format!(
            "sgd_step: shape mismatch param {:?} grad {:?} velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}

/// Cosine annealing: `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::usage("cosine_lr: total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::usage(format!(
            "cosine_lr: step {step} out of range 0..={total_steps}"
        )));
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0)
}
