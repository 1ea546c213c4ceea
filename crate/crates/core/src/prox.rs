//! Proximal operators and subgradient machinery for the elastic-net geometry
//! EN_lam(theta) = 1/2 |theta|_2^2 + lam |theta|_1.
//!
//! The gradient of the conjugate EN*_lam is the soft-thresholding operator, so
//! primal recovery from a dual point is a single shrink. Group penalties use
//! the block soft threshold over contiguous groups. All functions are pure.

use crate::error::{Error, Result};

/// Absolute tolerance for subgradient membership checks.
pub const SUBGRADIENT_TOL: f64 = 1e-9;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Component-wise sign(p_i) * max(|p_i| - thr, 0); exact zeros where |p_i| <= thr.
pub fn soft_threshold(p: &[f64], thr: f64) -> Result<Vec<f64>> {
    if thr < 0.0 {
        return Err(Error::InvalidThreshold(thr));
    }
    Ok(p.iter().map(|&x| sign(x) * (x.abs() - thr).max(0.0)).collect())
}

/// Block soft threshold over contiguous groups of `group_size` entries:
/// per group g, out_g = max(1 - thr/|p_g|_2, 0) * p_g.
pub fn group_soft_threshold(p: &[f64], group_size: usize, thr: f64) -> Result<Vec<f64>> {
    if thr < 0.0 {
        return Err(Error::InvalidThreshold(thr));
    }
    if group_size == 0 || p.len() % group_size != 0 {
        return Err(Error::InvalidPartition { len: p.len(), group_size });
    }
    let mut out = vec![0.0; p.len()];
    for (g_in, g_out) in p.chunks(group_size).zip(out.chunks_mut(group_size)) {
        let norm = g_in.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > thr {
            let scale = 1.0 - thr / norm;
            for (o, x) in g_out.iter_mut().zip(g_in) {
                *o = scale * x;
            }
        }
        // else: the whole group stays exactly zero.
    }
    Ok(out)
}

/// (1/beta) * soft_threshold(z, beta): the primal map when the whole
/// elastic-net potential is scaled by beta instead of only the l1 part.
pub fn prox_rescaled(z: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidThreshold(beta));
    }
    Ok(soft_threshold(z, beta)?.into_iter().map(|x| x / beta).collect())
}

/// Group version of [`prox_rescaled`]: (1/beta) * block soft threshold at beta.
pub fn group_prox_rescaled(z: &[f64], group_size: usize, beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidThreshold(beta));
    }
    Ok(group_soft_threshold(z, group_size, beta)?.into_iter().map(|x| x / beta).collect())
}

/// First index where p fails to be an EN_lam subgradient at theta, if any.
///
/// Membership means p_i = theta_i + lam * sign(theta_i) where theta_i != 0
/// (the subdifferential is a singleton there) and |p_i| <= lam where
/// theta_i = 0, both up to [`SUBGRADIENT_TOL`].
pub fn en_subgradient_violation(p: &[f64], theta: &[f64], lam: f64) -> Option<usize> {
    for (i, (&pi, &ti)) in p.iter().zip(theta).enumerate() {
        let ok = if ti != 0.0 {
            (pi - ti - lam * sign(ti)).abs() <= SUBGRADIENT_TOL
        } else {
            pi.abs() <= lam + SUBGRADIENT_TOL
        };
        if !ok {
            return Some(i);
        }
    }
    None
}

/// Adjust a dual vector after the regularization weight moves from `lam` to
/// `lam_new`, so that it remains a subgradient at the unchanged primal point:
/// c_i = (lam_new/lam) p_i + (1 - lam_new/lam) theta_i where theta_i != 0,
/// otherwise p_i clipped to [-lam_new, lam_new].
pub fn subgradient_correct(p: &[f64], theta: &[f64], lam: f64, lam_new: f64) -> Result<Vec<f64>> {
    if !(lam > 0.0) || !(lam_new > 0.0) {
        return Err(Error::InvalidThreshold(lam.min(lam_new)));
    }
    if p.len() != theta.len() {
        return Err(Error::ShapeMismatch { expected: theta.len(), got: p.len() });
    }
    if let Some(index) = en_subgradient_violation(p, theta, lam) {
        return Err(Error::NotASubgradient { index });
    }
    let ratio = lam_new / lam;
    Ok(p.iter()
        .zip(theta)
        .map(|(&pi, &ti)| if ti != 0.0 { ratio * pi + (1.0 - ratio) * ti } else { pi.clamp(-lam_new, lam_new) })
        .collect())
}

/// Group-penalty counterpart of [`en_subgradient_violation`]: for a nonzero
/// group the subdifferential is the singleton theta_g (1 + lam/|theta_g|_2);
/// for a zero group any vector with |p_g|_2 <= lam.
pub fn group_en_subgradient_violation(
    p: &[f64],
    theta: &[f64],
    group_size: usize,
    lam: f64,
) -> Option<usize> {
    for (g, (pg, tg)) in p.chunks(group_size).zip(theta.chunks(group_size)).enumerate() {
        let tnorm = tg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ok = if tnorm > 0.0 {
            let scale = 1.0 + lam / tnorm;
            pg.iter().zip(tg).all(|(&pi, &ti)| (pi - scale * ti).abs() <= SUBGRADIENT_TOL)
        } else {
            pg.iter().map(|x| x * x).sum::<f64>().sqrt() <= lam + SUBGRADIENT_TOL
        };
        if !ok {
            return Some(g * group_size);
        }
    }
    None
}

/// Group-penalty counterpart of [`subgradient_correct`]; zero groups are
/// radially clipped onto the lam_new ball.
pub fn group_subgradient_correct(
    p: &[f64],
    theta: &[f64],
    group_size: usize,
    lam: f64,
    lam_new: f64,
) -> Result<Vec<f64>> {
    if !(lam > 0.0) || !(lam_new > 0.0) {
        return Err(Error::InvalidThreshold(lam.min(lam_new)));
    }
    if p.len() != theta.len() {
        return Err(Error::ShapeMismatch { expected: theta.len(), got: p.len() });
    }
    if group_size == 0 || p.len() % group_size != 0 {
        return Err(Error::InvalidPartition { len: p.len(), group_size });
    }
    if let Some(index) = group_en_subgradient_violation(p, theta, group_size, lam) {
        return Err(Error::NotASubgradient { index });
    }
    let ratio = lam_new / lam;
    let mut out = vec![0.0; p.len()];
    for ((pg, tg), og) in
        p.chunks(group_size).zip(theta.chunks(group_size)).zip(out.chunks_mut(group_size))
    {
        let tnorm = tg.iter().map(|x| x * x).sum::<f64>().sqrt();
        if tnorm > 0.0 {
            for ((o, &pi), &ti) in og.iter_mut().zip(pg).zip(tg) {
                *o = ratio * pi + (1.0 - ratio) * ti;
            }
        } else {
            let pnorm = pg.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if pnorm > lam_new { lam_new / pnorm } else { 1.0 };
            for (o, &pi) in og.iter_mut().zip(pg) {
                *o = scale * pi;
            }
        }
    }
    Ok(out)
}

/// Canonical dual vector for a fresh primal point:
/// p_i = theta_i + lam * sign(theta_i), with 0 chosen at zero coordinates.
pub fn init_subgradient(theta: &[f64], lam: f64) -> Vec<f64> {
    debug_assert!(lam >= 0.0);
    theta.iter().map(|&t| if t != 0.0 { t + lam * sign(t) } else { 0.0 }).collect()
}
