//! Central finite-difference gradient checking.
//!
//! The harness only ever calls the forward pass, so it stays independent of
//! every hand-written vector-Jacobian product it is used to verify.

use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max_i |analytic_i - numeric_i| scaled by the largest gradient
    /// magnitude seen on either side.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar input components checked.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Checks analytic gradients of a scalar-valued graph against central
/// finite differences with step `h`.
///
/// `build` must construct the scalar output from the given leaves; it runs
/// once per perturbed forward, so keep the instances small.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic gradients.
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let root = build(&mut graph, &vars)?;
    graph.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
        })
        .collect();

    let eval_at = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_abs_err = 0.0f64;
    let mut scale = 0.0f64;
    let mut checked = 0;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let f_plus = eval_at(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let f_minus = eval_at(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
    }
    let max_rel_err = if scale > 0.0 {
        max_abs_err / scale
    } else {
        max_abs_err
    };
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        checked,
    })
}
