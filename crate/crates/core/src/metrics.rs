//! Diagnostics: layer-wise sparsity reports, norms, the elastic-net Bregman
//! divergence, the per-step descent-inequality monitor, and support recovery
//! scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{ParamStore, Scope};
use crate::prox;

/// Per-tensor slice of a sparsity report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub sparsity: f64,
    pub n_params: usize,
}

/// Snapshot of where the zeros sit. `global` is over regularized parameters;
/// `classifier` aggregates regularized tensors named "classifier*", `backbone`
/// the remaining regularized tensors. Either aggregate is None when its slice
/// is empty (a plain regressor has no classifier, for example).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub step: u64,
    pub global: f64,
    pub per_tensor: Vec<TensorSparsity>,
    pub classifier: Option<f64>,
    pub backbone: Option<f64>,
}

/// Exact zero counts per regularized tensor plus classifier/backbone rollups.
pub fn layerwise_report(store: &ParamStore, step: u64) -> Result<SparsityReport> {
    let global = store.sparsity(Scope::RegularizedOnly)?;
    let mut per_tensor = Vec::new();
    let mut cls_zeros = 0usize;
    let mut cls_total = 0usize;
    let mut back_zeros = 0usize;
    let mut back_total = 0usize;
    for t in store.tensors().iter().filter(|t| t.regularized()) {
        let zeros = t.len() - t.count_nonzero();
        per_tensor.push(TensorSparsity {
            name: t.name().to_string(),
            sparsity: zeros as f64 / t.len() as f64,
            n_params: t.len(),
        });
        if t.name().starts_with("classifier") {
            cls_zeros += zeros;
            cls_total += t.len();
        } else {
            back_zeros += zeros;
            back_total += t.len();
        }
    }
    let ratio = |z: usize, n: usize| if n == 0 { None } else { Some(z as f64 / n as f64) };
    Ok(SparsityReport {
        step,
        global,
        per_tensor,
        classifier: ratio(cls_zeros, cls_total),
        backbone: ratio(back_zeros, back_total),
    })
}

/// sqrt of the sum of squares over the scope; 0 for an empty scope.
pub fn frobenius_norm(store: &ParamStore, scope: Scope) -> f64 {
    let mut acc = 0.0;
    for t in store.tensors() {
        let in_scope = match scope {
            Scope::RegularizedOnly => t.regularized(),
            Scope::All => true,
        };
        if in_scope {
            for v in t.values() {
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// Bregman divergence of the elastic-net potential EN(t) = |t|^2/2 + lam*|t|_1
/// between theta and theta_ref, taken at the subgradient p_ref:
/// EN(theta) - EN(theta_ref) - <p_ref, theta - theta_ref>.
/// p_ref must be a valid subgradient at theta_ref.
pub fn bregman_divergence_en(
    theta: &[f64],
    theta_ref: &[f64],
    p_ref: &[f64],
    lam: f64,
) -> Result<f64> {
    if lam < 0.0 {
        return Err(Error::InvalidThreshold(lam));
    }
    if theta.len() != theta_ref.len() || theta.len() != p_ref.len() {
        return Err(Error::ShapeMismatch {
            expected: theta.len(),
            got: theta_ref.len().min(p_ref.len()),
        });
    }
    if let Some(index) = prox::en_subgradient_violation(p_ref, theta_ref, lam) {
        return Err(Error::NotASubgradient { index });
    }
    let en = |v: &[f64]| -> f64 {
        v.iter().map(|x| 0.5 * x * x + lam * x.abs()).sum()
    };
    let inner: f64 =
        p_ref.iter().zip(theta.iter().zip(theta_ref)).map(|(p, (a, b))| p * (a - b)).sum();
    Ok(en(theta) - en(theta_ref) - inner)
}

/// One monitored step of the sufficient-decrease inequality
/// prev >= next + (1/tau - L/2)|dtheta|^2 + ((lam_k - lam_km1)/tau)(|theta_next|_1 - |theta_prev|_1).
/// `lhs` is the bracketed lower bound, `rhs` the previous loss; a negative
/// residual beyond float noise flags a violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Record {
    pub k: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub violation: bool,
    pub tau: f64,
    pub l_smooth: f64,
    pub lambda_k: f64,
    pub lambda_km1: f64,
}

/// Evaluate the descent inequality for one full-batch step. Intended for
/// plain Bregman runs with the exact smoothness constant; stochastic or
/// moment-based runs may record it but should not assert on it.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_check(
    k: u64,
    prev_loss: f64,
    next_loss: f64,
    theta_prev: &[f64],
    theta_next: &[f64],
    tau: f64,
    l_smooth: f64,
    lam_k: f64,
    lam_km1: f64,
) -> Result<Lemma1Record> {
    if theta_prev.len() != theta_next.len() {
        return Err(Error::ShapeMismatch { expected: theta_prev.len(), got: theta_next.len() });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    for v in [prev_loss, next_loss, tau, l_smooth, lam_k, lam_km1] {
        if !v.is_finite() {
            return Err(Error::NonFinite("lemma1 scalar input"));
        }
    }
    let mut diff_sq = 0.0;
    let mut l1_prev = 0.0;
    let mut l1_next = 0.0;
    for (a, b) in theta_prev.iter().zip(theta_next) {
        let d = b - a;
        diff_sq += d * d;
        l1_prev += a.abs();
        l1_next += b.abs();
    }
    let lhs = next_loss
        + (1.0 / tau - l_smooth / 2.0) * diff_sq
        + ((lam_k - lam_km1) / tau) * (l1_next - l1_prev);
    let rhs = prev_loss;
    let residual = rhs - lhs;
    if !residual.is_finite() {
        return Err(Error::NonFinite("lemma1 residual"));
    }
    let violation = residual < -1e-9 * (1.0 + prev_loss.abs());
    Ok(Lemma1Record { k, lhs, rhs, residual, violation, tau, l_smooth, lambda_k: lam_k, lambda_km1: lam_km1 })
}

/// F1 score between the nonzero supports of an estimate and the ground truth.
/// Two empty supports count as a perfect match.
pub fn support_f1(theta: &[f64], theta_true: &[f64]) -> Result<f64> {
    if theta.len() != theta_true.len() {
        return Err(Error::ShapeMismatch { expected: theta_true.len(), got: theta.len() });
    }
    let mut est = 0usize;
    let mut truth = 0usize;
    let mut both = 0usize;
    for (a, b) in theta.iter().zip(theta_true) {
        let ea = *a != 0.0;
        let eb = *b != 0.0;
        est += ea as usize;
        truth += eb as usize;
        both += (ea && eb) as usize;
    }
    if est + truth == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (est + truth) as f64)
}
