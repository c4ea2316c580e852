//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls forward ops, so it stays independent of
//! the backward rules it is checking.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Largest mismatch found by [`check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v)).collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..work[ti].numel() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            let err = rel_err(a, numeric);
            worst.checked += 1;
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
    }
    Ok(worst)
}
