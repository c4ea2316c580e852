//! Scalar training objectives.
//!
//! Each loss comes in two forms: a plain function over slices, used for
//! reporting and as a cross-check, and a graph builder that records the same
//! computation on a [`Graph`] so it can be differentiated. All batch
//! reductions are arithmetic means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, softmax_rowwise, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the transition objective `alpha*L_rep + beta*L_pred - gamma*L_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { op, left: a, right: b });
    }
    if a == 0 {
        return Err(Error::Empty(op.to_string()));
    }
    Ok(())
}

fn check_binary(op: &'static str, labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(&label) => Err(Error::InvalidLabel { op, label }),
        None => Ok(()),
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths("mse_loss", pred.len(), target.len())?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / pred.len() as f64)
}

/// Binary cross-entropy on probabilities.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("bce_loss", p.len(), y.len())?;
    check_binary("bce_loss", y)?;
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / p.len() as f64)
}

/// Mean negative log-likelihood of the true domain under softmax of `B × 2`
/// logits. Labels are 0 for source and 1 for target.
pub fn domain_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dims2().filter(|&(_, c)| c == 2).ok_or_else(|| Error::ShapeMismatch {
        op: "domain_ce_loss",
        left: logits.shape().to_vec(),
        right: vec![labels.len(), 2],
    })?;
    check_lengths("domain_ce_loss", b, labels.len())?;
    let mut sum = 0.0;
    for (i, &d) in labels.iter().enumerate() {
        if d >= c {
            return Err(Error::InvalidLabel {
                op: "domain_ce_loss",
                label: d as f64,
            });
        }
        let row = logits.row_slice(i);
        let top = (0..c).fold(0, |a, j| if row[j] > row[a] { j } else { a });
        let rest: f64 = (0..c).filter(|&j| j != top).map(|j| (row[j] - row[top]).exp()).sum();
        sum += (row[top] - row[d]) + rest.ln_1p();
    }
    Ok(sum / b as f64)
}

/// `KL(softmax(teacher) || softmax(transition))` with the second distribution
/// clamped below at [`PROB_FLOOR`].
pub fn kl_rep_loss(s_teacher: &[f64], s_transition: &[f64]) -> Result<f64> {
    check_lengths("kl_rep_loss", s_teacher.len(), s_transition.len())?;
    let p = softmax(s_teacher)?;
    let q = softmax(s_transition)?;
    Ok(p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum())
}

/// `alpha*l_rep + beta*l_pred - gamma*l_d`.
pub fn transition_total(l_rep: f64, l_pred: f64, l_d: f64, w: &LossWeights) -> f64 {
    w.alpha * l_rep + w.beta * l_pred - w.gamma * l_d
}

/// Unit-weighted sum of outcome BCE and LOS MSE.
pub fn target_total(p_outcome: &[f64], y_outcome: &[f64], los_pred: &[f64], y_los: &[f64]) -> Result<f64> {
    check_lengths("target_total", p_outcome.len(), los_pred.len())?;
    Ok(bce_loss(p_outcome, y_outcome)? + mse_loss(los_pred, y_los)?)
}

fn same_shape(op: &'static str, g: &Graph, v: Var, t: &Tensor) -> Result<()> {
    if g.value(v).shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: g.value(v).shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Graph form of [`mse_loss`]; `target` is treated as a constant.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    same_shape("mse", g, pred, target)?;
    let t = g.constant(target.clone())?;
    let r = g.sub(pred, t)?;
    let sq = g.mul(r, r)?;
    g.mean(sq)
}

/// Graph form of [`bce_loss`].
pub fn bce(g: &mut Graph, p: Var, y: &Tensor) -> Result<Var> {
    same_shape("bce", g, p, y)?;
    check_binary("bce", y.data())?;
    let yv = g.constant(y.clone())?;
    let not_y = g.constant(Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| 1.0 - v).collect())?)?;
    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let log_p = g.log(pc)?;
    let neg = g.scale(pc, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_q = g.log(one_minus)?;
    let a = g.mul(yv, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.scale(m, -1.0)
}

/// Graph form of [`domain_ce_loss`].
pub fn domain_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = g.value(logits).dims2().filter(|&(_, c)| c == 2).ok_or_else(|| Error::ShapeMismatch {
        op: "domain_ce",
        left: g.value(logits).shape().to_vec(),
        right: vec![labels.len(), 2],
    })?;
    check_lengths("domain_ce", b, labels.len())?;
    let mut onehot = vec![0.0; b * c];
    for (i, &d) in labels.iter().enumerate() {
        if d >= c {
            return Err(Error::InvalidLabel {
                op: "domain_ce",
                label: d as f64,
            });
        }
        onehot[i * c + d] = 1.0;
    }
    let mask = g.constant(Tensor::matrix(b, c, onehot)?)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.mul(ls, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b as f64)
}

/// Batch-mean KL between row-wise softmax of the detached teacher
/// representations and the transition representations.
pub fn kl_rep(g: &mut Graph, s_teacher: &Tensor, s_transition: Var) -> Result<Var> {
    same_shape("kl_rep", g, s_transition, s_teacher)?;
    let b = s_teacher.rows();
    let p = softmax_rowwise(s_teacher)?;
    let entropy_term: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let pv = g.constant(p)?;
    let q = g.softmax(s_transition)?;
    let qc = g.clamp(q, PROB_FLOOR, 1.0)?;
    let log_q = g.log(qc)?;
    let cross = g.mul(pv, log_q)?;
    let cross_sum = g.sum(cross)?;
    let neg = g.scale(cross_sum, -1.0)?;
    let total = g.add_scalar(neg, entropy_term)?;
    g.scale(total, 1.0 / b as f64)
}
