//! Optimizer steps: linearized Bregman iterations (plain and Adam-moment
//! flavored), dense SGD/AdamW baselines, sparse initialization, and the
//! magnitude-pruning schedule.
//!
//! Bregman steps act on the regularized parameters only; the dual vector p
//! accumulates gradient signal and the primal point is recovered through the
//! elastic-net prox with threshold lambda itself (not tau * lambda).

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param_store::{Mask, ParamStore, Penalty};
use crate::prox;

/// How the adaptive runs treat a change of the regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Leave the dual untouched when lambda moves.
    Plain,
    /// Re-map the dual onto the new subdifferential after each lambda change.
    SubgradCorrect,
    /// Scale the whole potential by beta = lambda and use the rescaled prox.
    ProxRescale,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Plain
    }
}

/// One contiguous segment of the flat regularized vector, with the metadata
/// needed to apply its prox.
#[derive(Debug, Clone)]
pub struct ProxSeg {
    pub range: Range<usize>,
    pub penalty: Penalty,
    pub group_size: Option<usize>,
    pub lambda_scale: f64,
}

/// Per-tensor prox dispatch map over the flat regularized vector.
#[derive(Debug, Clone)]
pub struct ProxLayout {
    segs: Vec<ProxSeg>,
    len: usize,
}

impl ProxLayout {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut segs = Vec::new();
        let mut off = 0;
        for t in store.tensors().iter().filter(|t| t.regularized()) {
            segs.push(ProxSeg {
                range: off..off + t.len(),
                penalty: t.penalty(),
                group_size: t.group_size(),
                lambda_scale: t.lambda_scale(),
            });
            off += t.len();
        }
        ProxLayout { segs, len: off }
    }

    /// Single l1 segment covering a plain vector; handy for tests and the
    /// regression models.
    pub fn single_l1(len: usize) -> Self {
        ProxLayout {
            segs: vec![ProxSeg { range: 0..len, penalty: Penalty::L1, group_size: None, lambda_scale: 1.0 }],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segs(&self) -> &[ProxSeg] {
        &self.segs
    }

    /// Primal recovery from the dual vector at global weight `lambda`.
    pub fn apply(&self, p: &[f64], lambda: f64, variant: Variant) -> Result<Vec<f64>> {
        if p.len() != self.len {
            return Err(Error::ShapeMismatch { expected: self.len, got: p.len() });
        }
        let mut out = vec![0.0; p.len()];
        for seg in &self.segs {
            let eff = lambda * seg.lambda_scale;
            let slice = &p[seg.range.clone()];
            let mapped = match (variant, seg.penalty) {
                (Variant::ProxRescale, Penalty::L1) => prox::prox_rescaled(slice, eff)?,
                (Variant::ProxRescale, Penalty::GroupNorm) => {
                    prox::group_prox_rescaled(slice, seg.group_size.unwrap_or(0), eff)?
                }
                (_, Penalty::L1) => prox::soft_threshold(slice, eff)?,
                (_, Penalty::GroupNorm) => {
                    prox::group_soft_threshold(slice, seg.group_size.unwrap_or(0), eff)?
                }
            };
            out[seg.range.clone()].copy_from_slice(&mapped);
        }
        Ok(out)
    }

    /// Re-map the dual onto the subdifferential at the new weight, segment by
    /// segment with each tensor's effective lambda.
    pub fn correct_dual(
        &self,
        p: &mut [f64],
        theta: &[f64],
        lam_old: f64,
        lam_new: f64,
    ) -> Result<()> {
        if p.len() != self.len || theta.len() != self.len {
            return Err(Error::ShapeMismatch { expected: self.len, got: p.len().min(theta.len()) });
        }
        for seg in &self.segs {
            let old_eff = lam_old * seg.lambda_scale;
            let new_eff = lam_new * seg.lambda_scale;
            let ps = &p[seg.range.clone()];
            let ts = &theta[seg.range.clone()];
            let corrected = match seg.penalty {
                Penalty::L1 => prox::subgradient_correct(ps, ts, old_eff, new_eff)?,
                Penalty::GroupNorm => prox::group_subgradient_correct(
                    ps,
                    ts,
                    seg.group_size.unwrap_or(0),
                    old_eff,
                    new_eff,
                )?,
            };
            p[seg.range.clone()].copy_from_slice(&corrected);
        }
        Ok(())
    }

    /// First flat index at which p is not a valid subgradient at theta, if any.
    pub fn subgradient_violation(&self, p: &[f64], theta: &[f64], lambda: f64) -> Option<usize> {
        for seg in &self.segs {
            let eff = lambda * seg.lambda_scale;
            let ps = &p[seg.range.clone()];
            let ts = &theta[seg.range.clone()];
            let bad = match seg.penalty {
                Penalty::L1 => prox::en_subgradient_violation(ps, ts, eff),
                Penalty::GroupNorm => prox::group_en_subgradient_violation(
                    ps,
                    ts,
                    seg.group_size.unwrap_or(1),
                    eff,
                ),
            };
            if let Some(i) = bad {
                return Some(seg.range.start + i);
            }
        }
        None
    }
}

/// Dual state of plain linearized Bregman iterations.
#[derive(Debug, Clone)]
pub struct LinBregState {
    pub p: Vec<f64>,
    pub tau: f64,
}

impl LinBregState {
    pub fn new(p: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        Ok(LinBregState { p, tau })
    }
}

/// Dual step p <- p - tau * grad, then primal recovery through the prox.
pub fn linbreg_step(
    state: &mut LinBregState,
    grad: &[f64],
    layout: &ProxLayout,
    lambda: f64,
    variant: Variant,
) -> Result<Vec<f64>> {
    if grad.len() != state.p.len() {
        return Err(Error::ShapeMismatch { expected: state.p.len(), got: grad.len() });
    }
    for (pi, gi) in state.p.iter_mut().zip(grad) {
        *pi -= state.tau * gi;
    }
    layout.apply(&state.p, lambda, variant)
}

/// Bregman iterations with Adam-style moments on the dual update.
#[derive(Debug, Clone)]
pub struct AdaBregState {
    pub p: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
    pub tau: f64,
}

impl AdaBregState {
    pub fn new(p: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        let n = p.len();
        Ok(AdaBregState {
            p,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
            tau,
        })
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::InvalidConfig(format!("betas must lie in [0,1), got {beta1}, {beta2}")));
        }
        self.beta1 = beta1;
        self.beta2 = beta2;
        Ok(self)
    }
}

/// t += 1; moment update; bias-corrected dual step; primal recovery.
pub fn adabreg_step(
    state: &mut AdaBregState,
    grad: &[f64],
    layout: &ProxLayout,
    lambda: f64,
    variant: Variant,
) -> Result<Vec<f64>> {
    if grad.len() != state.p.len() {
        return Err(Error::ShapeMismatch { expected: state.p.len(), got: grad.len() });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..grad.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        state.p[i] -= state.tau * m_hat / (v_hat.sqrt() + state.eps_num);
    }
    layout.apply(&state.p, lambda, variant)
}

/// Momentum SGD for the densely trained (excluded) parameter set.
#[derive(Debug, Clone)]
pub struct SgdState {
    buf: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl SgdState {
    pub fn new(dim: usize, lr: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        Ok(SgdState { buf: vec![0.0; dim], lr, momentum, weight_decay, nesterov })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Classic momentum SGD; the L2 term enters through the gradient
/// (g + wd * theta), not through the loss.
pub fn sgd_step(state: &mut SgdState, theta: &mut [f64], grad: &[f64]) -> Result<()> {
    if grad.len() != theta.len() || theta.len() != state.buf.len() {
        return Err(Error::ShapeMismatch { expected: state.buf.len(), got: grad.len() });
    }
    for i in 0..theta.len() {
        let g = grad[i] + state.weight_decay * theta[i];
        let d = if state.momentum != 0.0 {
            state.buf[i] = state.momentum * state.buf[i] + g;
            if state.nesterov { g + state.momentum * state.buf[i] } else { state.buf[i] }
        } else {
            g
        };
        theta[i] -= state.lr * d;
    }
    Ok(())
}

/// Adam with decoupled weight decay, for the dense baseline and the excluded
/// parameters of AdaBreg runs.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(dim: usize, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        Ok(AdamWState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
            weight_decay,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Decoupled decay theta *= (1 - lr * wd), then the bias-corrected Adam step.
pub fn adamw_step(state: &mut AdamWState, theta: &mut [f64], grad: &[f64]) -> Result<()> {
    if grad.len() != theta.len() || theta.len() != state.m.len() {
        return Err(Error::ShapeMismatch { expected: state.m.len(), got: grad.len() });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        theta[i] -= state.lr * state.weight_decay * theta[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps_num);
    }
    Ok(())
}

/// Zero each regularized entry independently with probability `s_init`,
/// rescale survivors by 1/sqrt(1 - s_init) to preserve layer output variance,
/// and return the matching initial dual vector. The dual entries for each
/// tensor use its effective threshold lambda0 * lambda_scale so the pair
/// (theta, p) starts subgradient-feasible even under per-tensor scaling.
pub fn sparse_init(
    store: &mut ParamStore,
    s_init: f64,
    lambda0: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&s_init) {
        return Err(Error::InvalidConfig(format!("s_init must lie in [0,1), got {s_init}")));
    }
    if lambda0 < 0.0 {
        return Err(Error::InvalidThreshold(lambda0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rescale = 1.0 / (1.0 - s_init).sqrt();
    let mut dual = Vec::with_capacity(store.d_reg());
    for t in store.tensors_mut().iter_mut().filter(|t| t.regularized()) {
        let scale = t.lambda_scale();
        for v in t.values_mut() {
            if rng.random::<f64>() < s_init {
                *v = 0.0;
            } else {
                *v *= rescale;
            }
        }
        dual.extend_from_slice(&prox::init_subgradient(t.values(), lambda0 * scale));
    }
    Ok(dual)
}

/// Sparsity target of the gradual pruning ramp at epoch `i`:
/// 1 - (1 - s_target)^(i/e_total), clamped at s_target once i > e_total.
pub fn prune_schedule_sparsity(i: usize, e_total: usize, s_target: f64) -> Result<f64> {
    if e_total == 0 {
        return Err(Error::InvalidConfig("pruning schedule needs at least one epoch".into()));
    }
    if !(0.0 < s_target && s_target < 1.0) {
        return Err(Error::InvalidConfig(format!("target sparsity must lie in (0,1), got {s_target}")));
    }
    if i > e_total {
        return Ok(s_target);
    }
    Ok(1.0 - (1.0 - s_target).powf(i as f64 / e_total as f64))
}

/// Global magnitude criterion: drop the floor(s_i * d_reg) smallest
/// regularized magnitudes across all tensors; excluded tensors keep all bits
/// set. Ties break by position so the mask is deterministic.
pub fn magnitude_prune(store: &ParamStore, s_i: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&s_i) {
        return Err(Error::InvalidConfig(format!("s_i must lie in [0,1), got {s_i}")));
    }
    let d_reg = store.d_reg();
    let drop = (s_i * d_reg as f64).floor() as usize;
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(d_reg);
    for (ti, t) in store.tensors().iter().enumerate() {
        if t.regularized() {
            for (vi, v) in t.values().iter().enumerate() {
                ranked.push((v.abs(), ti, vi));
            }
        }
    }
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut lanes: Vec<Vec<bool>> = store.tensors().iter().map(|t| vec![true; t.len()]).collect();
    for (_, ti, vi) in ranked.into_iter().take(drop) {
        lanes[ti][vi] = false;
    }
    Ok(Mask::from_lanes(lanes))
}

/// Mutable pruning-schedule state; masks are intersected across epochs so the
/// schedule stays monotone.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub mask: Mask,
    pub target: f64,
    pub schedule_epochs: usize,
}

impl PruneState {
    pub fn new(store: &ParamStore, target: f64, schedule_epochs: usize) -> Result<Self> {
        if !(0.0 < target && target < 1.0) {
            return Err(Error::InvalidConfig(format!("target sparsity must lie in (0,1), got {target}")));
        }
        if schedule_epochs == 0 {
            return Err(Error::InvalidConfig("pruning schedule needs at least one epoch".into()));
        }
        Ok(PruneState { mask: Mask::all_ones(store), target, schedule_epochs })
    }

    /// Recompute the mask for epoch `i` and fold it into the running mask.
    pub fn advance(&mut self, store: &ParamStore, epoch: usize) -> Result<()> {
        let s_i = prune_schedule_sparsity(epoch, self.schedule_epochs, self.target)?;
        let fresh = magnitude_prune(store, s_i)?;
        self.mask = self.mask.and(&fresh)?;
        Ok(())
    }
}

// Optimizer checkpoint: "SPKO" magic, version u16 LE, embedded store in its
// own binary layout, global lambda f64, per-regularized-tensor effective
// lambdas, dual p, and optional (m, v, t) moments. All floats as raw
// little-endian IEEE-754 bits; round-trips bit-exactly.
const OPT_MAGIC: &[u8; 4] = b"SPKO";
const OPT_VERSION: u16 = 1;

/// Portable snapshot of a Bregman training state.
#[derive(Debug, Clone)]
pub struct TrainCheckpoint {
    pub store: ParamStore,
    pub lambda: f64,
    pub p: Vec<f64>,
    /// (m, v, t) when the run used Adam-style moments.
    pub moments: Option<(Vec<f64>, Vec<f64>, u64)>,
}

impl TrainCheckpoint {
    pub fn effective_lambdas(&self) -> Vec<(String, f64)> {
        self.store
            .tensors()
            .iter()
            .filter(|t| t.regularized())
            .map(|t| (t.name().to_string(), self.lambda * t.lambda_scale()))
            .collect()
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OPT_MAGIC)?;
        w.write_all(&OPT_VERSION.to_le_bytes())?;
        self.store.write_binary(w)?;
        w.write_all(&self.lambda.to_bits().to_le_bytes())?;
        let lams = self.effective_lambdas();
        w.write_all(&(lams.len() as u32).to_le_bytes())?;
        for (name, lam) in &lams {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&lam.to_bits().to_le_bytes())?;
        }
        w.write_all(&(self.p.len() as u64).to_le_bytes())?;
        for x in &self.p {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
        match &self.moments {
            None => w.write_all(&[0u8])?,
            Some((m, v, t)) => {
                w.write_all(&[1u8])?;
                w.write_all(&(*t).to_le_bytes())?;
                for x in m.iter().chain(v) {
                    w.write_all(&x.to_bits().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != OPT_MAGIC {
            return Err(Error::Serialization("bad checkpoint magic".into()));
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)?;
        if u16::from_le_bytes(ver) != OPT_VERSION {
            return Err(Error::Serialization("unsupported checkpoint version".into()));
        }
        let store = ParamStore::read_binary(r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let lambda = f64::from_bits(u64::from_le_bytes(b8));
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n_lams = u32::from_le_bytes(b4) as usize;
        for _ in 0..n_lams {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            r.read_exact(&mut b8)?; // per-tensor lambda; derived, not stored back
        }
        r.read_exact(&mut b8)?;
        let p_len = u64::from_le_bytes(b8) as usize;
        let mut p = Vec::with_capacity(p_len);
        for _ in 0..p_len {
            r.read_exact(&mut b8)?;
            p.push(f64::from_bits(u64::from_le_bytes(b8)));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let moments = if flag[0] == 1 {
            r.read_exact(&mut b8)?;
            let t = u64::from_le_bytes(b8);
            let mut m = Vec::with_capacity(p_len);
            let mut v = Vec::with_capacity(p_len);
            for _ in 0..p_len {
                r.read_exact(&mut b8)?;
                m.push(f64::from_bits(u64::from_le_bytes(b8)));
            }
            for _ in 0..p_len {
                r.read_exact(&mut b8)?;
                v.push(f64::from_bits(u64::from_le_bytes(b8)));
            }
            Some((m, v, t))
        } else {
            None
        };
        Ok(TrainCheckpoint { store, lambda, p, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_store::{ParamStore, ParamTensor, Scope};

    fn vec_store(values: Vec<f64>) -> ParamStore {
        let n = values.len();
        ParamStore::new(vec![ParamTensor::l1("w", vec![n], values).unwrap()]).unwrap()
    }

    #[test]
    fn linbreg_single_step_closed_form() {
        let layout = ProxLayout::single_l1(1);
        let mut st = LinBregState::new(vec![0.6], 0.1).unwrap();
        let theta = linbreg_step(&mut st, &[1.0], &layout, 0.5, Variant::Plain).unwrap();
        assert!((st.p[0] - 0.5).abs() < 1e-15);
        assert_eq!(theta, vec![0.0]);
    }

    #[test]
    fn linbreg_zero_grad_zero_lambda_is_identity() {
        let layout = ProxLayout::single_l1(3);
        let mut st = LinBregState::new(vec![1.0, -2.0, 0.5], 0.1).unwrap();
        let before = st.p.clone();
        let theta = linbreg_step(&mut st, &[0.0; 3], &layout, 0.0, Variant::Plain).unwrap();
        assert_eq!(st.p, before);
        assert_eq!(theta, before);
    }

    #[test]
    fn linbreg_fixed_point_on_scalar_quadratic() {
        // L(t) = 1/2 (t-1)^2, tau = 0.5, lambda = 0.05, direct iteration.
        let layout = ProxLayout::single_l1(1);
        let mut st = LinBregState::new(vec![0.0], 0.5).unwrap();
        let mut theta = vec![0.0];
        for _ in 0..200 {
            let grad = vec![theta[0] - 1.0];
            theta = linbreg_step(&mut st, &grad, &layout, 0.05, Variant::Plain).unwrap();
        }
        // Stationarity: grad -> 0, so theta* = 1 and p* = theta* + lambda.
        assert!((theta[0] - 1.0).abs() < 1e-8);
        let reprox = crate::prox::soft_threshold(&st.p, 0.05).unwrap();
        assert!((reprox[0] - theta[0]).abs() < 1e-8);
        assert!((st.p[0] - 1.05).abs() < 1e-6);
    }

    #[test]
    fn linbreg_lambda_zero_equals_gradient_descent_bitwise() {
        // Quadratic in 3 variables; grad evaluated at current theta each step.
        let layout = ProxLayout::single_l1(3);
        let target = [1.0, -2.0, 0.3];
        let theta0 = vec![0.4, 0.1, -0.9];
        let mut st = LinBregState::new(theta0.clone(), 0.2).unwrap();
        let mut theta_breg = theta0.clone();
        let mut theta_gd = theta0;
        for _ in 0..57 {
            let grad: Vec<f64> = theta_breg.iter().zip(&target).map(|(t, c)| t - c).collect();
            theta_breg = linbreg_step(&mut st, &grad, &layout, 0.0, Variant::Plain).unwrap();
            let grad_gd: Vec<f64> = theta_gd.iter().zip(&target).map(|(t, c)| t - c).collect();
            for (t, g) in theta_gd.iter_mut().zip(&grad_gd) {
                *t -= 0.2 * g;
            }
            for (a, b) in theta_breg.iter().zip(&theta_gd) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn linbreg_dual_feasible_after_step() {
        let layout = ProxLayout::single_l1(4);
        let mut st = LinBregState::new(vec![0.3, -1.2, 0.01, 2.0], 0.05).unwrap();
        let lambda = 0.4;
        let theta = linbreg_step(&mut st, &[0.5, -0.2, 0.9, -1.4], &layout, lambda, Variant::Plain)
            .unwrap();
        assert_eq!(layout.subgradient_violation(&st.p, &theta, lambda), None);
    }

    #[test]
    fn linbreg_respects_lambda_scale_and_groups() {
        let store = ParamStore::new(vec![
            ParamTensor::l1("a", vec![2], vec![0.0, 0.0]).unwrap().with_lambda_scale(2.0).unwrap(),
            ParamTensor::group_norm("c", vec![1, 2], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let layout = ProxLayout::from_store(&store);
        // p after step: [0.5, 0.25, 0.3, 0.4]; lambda = 0.3 -> thresholds 0.6 / 0.3.
        let mut st = LinBregState::new(vec![0.5, 0.25, 0.3, 0.4], 1.0).unwrap();
        let theta = linbreg_step(&mut st, &[0.0; 4], &layout, 0.3, Variant::Plain).unwrap();
        assert_eq!(theta[0], 0.0); // |0.5| <= 0.6
        assert_eq!(theta[1], 0.0);
        // Group norm 0.5 > 0.3: scale 1 - 0.3/0.5 = 0.4.
        assert!((theta[2] - 0.12).abs() < 1e-12);
        assert!((theta[3] - 0.16).abs() < 1e-12);
    }

    #[test]
    fn adabreg_first_step_matches_scalar_reference() {
        let layout = ProxLayout::single_l1(1);
        let mut st = AdaBregState::new(vec![0.0], 0.01).unwrap();
        adabreg_step(&mut st, &[1.0], &layout, 0.0, Variant::Plain).unwrap();
        // Scalar reference: m-hat = v-hat = 1, step = tau / (1 + eps).
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((st.p[0] - expected).abs() < 1e-15);
        assert!((st.p[0] - (-0.0099999999)).abs() < 1e-10);
    }

    #[test]
    fn adabreg_zero_grad_zero_moments_leaves_p() {
        let layout = ProxLayout::single_l1(2);
        let mut st = AdaBregState::new(vec![0.7, -0.1], 0.01).unwrap();
        let before = st.p.clone();
        adabreg_step(&mut st, &[0.0, 0.0], &layout, 0.1, Variant::Plain).unwrap();
        assert_eq!(st.p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adabreg_degenerate_betas_give_sign_normalized_step() {
        let layout = ProxLayout::single_l1(2);
        let mut st =
            AdaBregState::new(vec![0.0, 0.0], 0.05).unwrap().with_betas(0.0, 0.0).unwrap();
        adabreg_step(&mut st, &[2.0, -0.3], &layout, 0.0, Variant::Plain).unwrap();
        for (pi, g) in st.p.iter().zip(&[2.0, -0.3f64]) {
            let expected = -0.05 * g / (g.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut st = SgdState::new(2, 0.1, 0.0, 0.0, false).unwrap();
        let mut theta = vec![1.0, -1.0];
        sgd_step(&mut st, &mut theta, &[0.5, -0.5]).unwrap();
        assert_eq!(theta, vec![0.95, -0.95]);
    }

    #[test]
    fn sgd_zero_grad_zero_buffer_is_identity() {
        let mut st = SgdState::new(2, 0.1, 0.9, 0.0, true).unwrap();
        let mut theta = vec![1.0, -1.0];
        sgd_step(&mut st, &mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![1.0, -1.0]);
    }

    #[test]
    fn sgd_momentum_displacement_matches_scalar_recursion() {
        // Plain momentum, constant g = 1, lr = 0.1: displacement after two
        // steps is 0.1 * (1 + 1.9) = 0.29.
        let mut st = SgdState::new(1, 0.1, 0.9, 0.0, false).unwrap();
        let mut theta = vec![0.0];
        sgd_step(&mut st, &mut theta, &[1.0]).unwrap();
        sgd_step(&mut st, &mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.29).abs() < 1e-15);

        // Nesterov flavor checked against an independent scalar recursion.
        let (lr, mu, steps) = (0.1, 0.9, 5);
        let mut st = SgdState::new(1, lr, mu, 0.0, true).unwrap();
        let mut theta = vec![0.0];
        for _ in 0..steps {
            sgd_step(&mut st, &mut theta, &[1.0]).unwrap();
        }
        let mut buf = 0.0;
        let mut ref_theta = 0.0f64;
        for _ in 0..steps {
            buf = mu * buf + 1.0;
            ref_theta -= lr * (1.0 + mu * buf);
        }
        assert!((theta[0] - ref_theta).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_enters_through_grad() {
        let mut st = SgdState::new(1, 0.1, 0.0, 0.5, false).unwrap();
        let mut theta = vec![2.0];
        sgd_step(&mut st, &mut theta, &[0.0]).unwrap();
        assert!((theta[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_nonpositive_lr() {
        assert!(SgdState::new(1, 0.0, 0.9, 0.0, false).is_err());
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut st = AdamWState::new(2, 0.01, 0.0).unwrap();
        let mut theta = vec![1.0, -3.0];
        adamw_step(&mut st, &mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![1.0, -3.0]);
    }

    #[test]
    fn adamw_first_step_uses_unbiased_moment() {
        let mut st = AdamWState::new(1, 0.01, 0.0).unwrap();
        let mut theta = vec![0.0];
        adamw_step(&mut st, &mut theta, &[0.7]).unwrap();
        // m-hat = g, v-hat = g^2 on the first step.
        let expected = -0.01 * 0.7 / (0.7 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_scalar_recursion_with_decay() {
        let (lr, wd, b1, b2, eps) = (0.02, 0.1, 0.9, 0.999, 1e-8);
        let grads = [0.5, -1.0, 0.25];
        let mut st = AdamWState::new(1, lr, wd).unwrap();
        let mut theta = vec![0.3];
        for g in grads {
            adamw_step(&mut st, &mut theta, &[g]).unwrap();
        }
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.3f64);
        for (t, g) in grads.iter().enumerate() {
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t as i32 + 1));
            let vh: f64 = v / (1.0 - f64::powi(b2, t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((theta[0] - x).abs() < 1e-15);
    }

    #[test]
    fn sparse_init_zero_probability_keeps_values() {
        let mut store = vec_store(vec![0.4, -0.2, 1.0]);
        let p = sparse_init(&mut store, 0.0, 0.05, 7).unwrap();
        assert_eq!(store.flat(Scope::All), vec![0.4, -0.2, 1.0]);
        assert_eq!(p, crate::prox::init_subgradient(&[0.4, -0.2, 1.0], 0.05));
    }

    #[test]
    fn sparse_init_hits_binomial_band() {
        // d = 10^4, s_init = 0.99. Bernstein bound: the measured sparsity
        // falls outside [0.985, 0.995] with probability at most
        // 2 exp(-n t^2 / (2 p (1-p) + 2 t / 3)), t = 0.005 -> ~4e-5 < 0.01,
        // so the band holds with probability > 0.99; assert the seeded draw.
        let (n, p, t): (f64, f64, f64) = (10_000.0, 0.99, 0.005);
        let bernstein = 2.0 * (-n * t * t / (2.0 * p * (1.0 - p) + 2.0 * t / 3.0)).exp();
        assert!(bernstein < 0.01);
        let mut store = vec_store(vec![1.0; 10_000]);
        sparse_init(&mut store, 0.99, 0.01, 1234).unwrap();
        let s = store.sparsity(Scope::RegularizedOnly).unwrap();
        assert!((0.985..=0.995).contains(&s), "sparsity {s} outside band");
    }

    #[test]
    fn sparse_init_rescales_survivors() {
        let mut store = vec_store(vec![2.0; 50]);
        sparse_init(&mut store, 0.75, 0.0, 99).unwrap();
        for v in store.tensor("w").unwrap().values() {
            assert!(*v == 0.0 || (*v - 4.0).abs() < 1e-12); // 2 / sqrt(0.25) = 4
        }
    }

    #[test]
    fn sparse_init_lambda_zero_dual_equals_theta() {
        let mut store = vec_store(vec![0.5, -0.25, 0.0, 1.5]);
        let p = sparse_init(&mut store, 0.0, 0.0, 3).unwrap();
        assert_eq!(p, store.flat(Scope::RegularizedOnly));
    }

    #[test]
    fn sparse_init_rejects_bad_probability() {
        let mut store = vec_store(vec![1.0]);
        assert!(sparse_init(&mut store, 1.0, 0.1, 0).is_err());
        assert!(sparse_init(&mut store, -0.1, 0.1, 0).is_err());
    }

    #[test]
    fn sparse_init_leaves_excluded_tensors() {
        let mut store = ParamStore::new(vec![
            ParamTensor::l1("w", vec![4], vec![1.0; 4]).unwrap(),
            ParamTensor::excluded("b", vec![2], vec![3.0, -3.0]).unwrap(),
        ])
        .unwrap();
        sparse_init(&mut store, 0.9, 0.1, 11).unwrap();
        assert_eq!(store.tensor("b").unwrap().values(), &[3.0, -3.0]);
    }

    #[test]
    fn sparse_init_dual_feasible_under_lambda_scale() {
        let mut store = ParamStore::new(vec![
            ParamTensor::l1("w", vec![6], vec![0.8; 6]).unwrap(),
            ParamTensor::l1("classifier.weight", vec![4], vec![-0.6; 4])
                .unwrap()
                .with_lambda_scale(2.0)
                .unwrap(),
        ])
        .unwrap();
        let lambda0 = 0.3;
        let p = sparse_init(&mut store, 0.5, lambda0, 21).unwrap();
        let layout = ProxLayout::from_store(&store);
        let theta = store.flat(Scope::RegularizedOnly);
        assert_eq!(layout.subgradient_violation(&p, &theta, lambda0), None);
        // The scaled tensor's zero entries must have grown a scaled cap too.
        for (pi, ti) in p[6..].iter().zip(&theta[6..]) {
            if *ti != 0.0 {
                assert!((pi - (ti - 2.0 * lambda0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prune_schedule_endpoints() {
        assert_eq!(prune_schedule_sparsity(10, 10, 0.9).unwrap(), 0.9);
        assert_eq!(prune_schedule_sparsity(0, 10, 0.9).unwrap(), 0.0);
        assert_eq!(prune_schedule_sparsity(25, 10, 0.9).unwrap(), 0.9);
    }

    #[test]
    fn prune_schedule_midpoint() {
        let s = prune_schedule_sparsity(5, 10, 0.9).unwrap();
        assert!((s - (1.0 - 0.1f64.sqrt())).abs() < 1e-12);
        assert!((s - 0.68377).abs() < 1e-4);
    }

    #[test]
    fn prune_schedule_rejects_zero_epochs() {
        assert!(prune_schedule_sparsity(1, 0, 0.9).is_err());
    }

    #[test]
    fn magnitude_prune_keeps_largest() {
        let store = vec_store(vec![0.1, -3.0, 0.2, 5.0]);
        let mask = magnitude_prune(&store, 0.5).unwrap();
        assert_eq!(mask.lanes()[0], vec![false, true, false, true]);
    }

    #[test]
    fn magnitude_prune_zero_target_is_all_ones() {
        let store = vec_store(vec![0.1, -3.0, 0.2, 5.0]);
        let mask = magnitude_prune(&store, 0.0).unwrap();
        assert_eq!(mask.count_zeros(), 0);
    }

    #[test]
    fn magnitude_prune_against_full_sort_oracle() {
        // 1000 distinct magnitudes; independent full sort decides the cut.
        let values: Vec<f64> =
            (0..1000).map(|i| ((i * 7919 % 1000) as f64 - 500.0) / 3.0 + 0.123).collect();
        let store = vec_store(values.clone());
        let mask = magnitude_prune(&store, 0.9).unwrap();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for (v, keep) in values.iter().zip(&mask.lanes()[0]) {
            if *keep {
                kept.push(v.abs());
            } else {
                dropped.push(v.abs());
            }
        }
        assert_eq!(dropped.len(), 900);
        let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        let cut = sorted[899];
        assert!(kept.iter().all(|k| *k >= cut));
        assert!(dropped.iter().all(|d| *d <= cut));
    }

    #[test]
    fn magnitude_prune_never_touches_excluded() {
        let store = ParamStore::new(vec![
            ParamTensor::l1("w", vec![2], vec![0.0, 0.1]).unwrap(),
            ParamTensor::excluded("b", vec![2], vec![1e-9, 0.0]).unwrap(),
        ])
        .unwrap();
        let mask = magnitude_prune(&store, 0.5).unwrap();
        assert_eq!(mask.lanes()[1], vec![true, true]);
    }

    #[test]
    fn prune_state_masks_are_nested() {
        let values: Vec<f64> = (0..200).map(|i| ((i * 31 % 200) as f64 - 100.0) / 7.0).collect();
        let mut store = vec_store(values);
        let mut st = PruneState::new(&store, 0.9, 10).unwrap();
        let mut prev = st.mask.clone();
        for epoch in 0..=12 {
            st.advance(&store, epoch).unwrap();
            assert!(st.mask.nested_in(&prev), "mask not nested at epoch {epoch}");
            prev = st.mask.clone();
            store.apply_mask(&st.mask).unwrap();
        }
        // Endpoint: floor(0.9 * 200) = 180 zeros.
        assert_eq!(store.count_nonzero(Scope::RegularizedOnly), 20);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let store = ParamStore::new(vec![
            ParamTensor::l1("w", vec![3], vec![0.1, 0.0, -2.0]).unwrap(),
            ParamTensor::excluded("b", vec![1], vec![0.5]).unwrap(),
        ])
        .unwrap();
        let ckpt = TrainCheckpoint {
            store,
            lambda: 0.037,
            p: vec![0.11, -0.02, -2.3],
            moments: Some((vec![1e-3, 0.0, -0.4], vec![1e-6, 0.0, 0.16], 41)),
        };
        let mut buf = Vec::new();
        ckpt.write_binary(&mut buf).unwrap();
        let back = TrainCheckpoint::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.lambda.to_bits(), ckpt.lambda.to_bits());
        for (a, b) in back.p.iter().zip(&ckpt.p) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.effective_lambdas(), vec![("w".to_string(), 0.037)]);
        let (m, v, t) = back.moments.unwrap();
        let (m0, v0, t0) = ckpt.moments.unwrap();
        assert_eq!(t, t0);
        assert_eq!(m.len(), m0.len());
        assert_eq!(v.len(), v0.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn dual_stays_feasible_over_random_trajectories(
                seed in 0u64..500,
                lambda in 0.01..1.0f64,
                steps in 1usize..25,
            ) {
                let layout = ProxLayout::single_l1(6);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut st = LinBregState::new(
                    (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    0.1,
                ).unwrap();
                let mut theta = vec![0.0; 6];
                for _ in 0..steps {
                    let grad: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                    theta = linbreg_step(&mut st, &grad, &layout, lambda, Variant::Plain).unwrap();
                }
                prop_assert_eq!(layout.subgradient_violation(&st.p, &theta, lambda), None);
            }

            #[test]
            fn schedule_monotone_in_epoch(e in 1usize..40, s in 0.05..0.99f64) {
                let mut prev = -1.0;
                for i in 0..=e + 5 {
                    let v = prune_schedule_sparsity(i, e, s).unwrap();
                    prop_assert!(v >= prev - 1e-15);
                    prop_assert!((0.0..=s + 1e-15).contains(&v));
                    prev = v;
                }
            }
        }
    }
}
