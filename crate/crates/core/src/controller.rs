//! Feedback controller that steers the regularization weight toward a target
//! sparsity.
//!
//! Every `f` steps the controller measures the sparsity defect
//! eps = s_target - s_current and rescales lambda multiplicatively by
//! (1 + alpha*|eps|)^sgn(eps). Once the defect is small the damping rule
//! stretches the firing interval and shrinks the acceleration so the loop
//! settles instead of chattering around the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Variant;

/// Tunables for the adaptive lambda loop, as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Starting weight; None picks the optimizer preset.
    pub lambda0: Option<f64>,
    /// Adaptation interval in steps.
    pub f: u64,
    /// Acceleration factor on the defect.
    pub alpha: f64,
    /// Tolerance band half-width around the target.
    pub zeta: f64,
    /// Damping threshold on |eps|.
    pub zeta_d: f64,
    /// Interval growth factor under damping.
    pub gamma_f: u64,
    /// Acceleration scale factor under damping. The default 0.1 reduces the
    /// update size; the increase reading (10.0, `GAMMA_ALPHA_LITERAL`) stays
    /// selectable for comparison.
    pub gamma_alpha: f64,
    /// Cap on the interval growth.
    pub f_max: u64,
    /// Floor under the acceleration decay.
    pub alpha_min: f64,
    /// Freeze lambda permanently once the tolerance band is reached.
    pub stop_on_tolerance: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda0: None,
            f: 50,
            alpha: 1.0,
            zeta: 0.01,
            zeta_d: 0.005,
            gamma_f: 2,
            gamma_alpha: 0.1,
            f_max: 6400,
            alpha_min: 1e-3,
            stop_on_tolerance: false,
        }
    }
}

impl ControllerConfig {
    /// Conservative acceleration preset.
    pub const ALPHA_CONSERVATIVE: f64 = 0.25;
    /// Damping factor read literally as an increase; see `gamma_alpha`.
    pub const GAMMA_ALPHA_LITERAL: f64 = 10.0;
    /// Starting weight preset for plain Bregman runs.
    pub const LAMBDA0_LINBREG: f64 = 0.01;
    /// Starting weight preset for moment-based Bregman runs.
    pub const LAMBDA0_ADABREG: f64 = 1.0;

    pub fn validate(&self) -> Result<()> {
        if let Some(l0) = self.lambda0 {
            if !(l0 >= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda0 must be nonnegative, got {l0}")));
            }
        }
        if self.f == 0 {
            return Err(Error::InvalidConfig("f must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidConfig(format!("zeta must lie in (0,1), got {}", self.zeta)));
        }
        if !(self.zeta_d > 0.0 && self.zeta_d < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "zeta_d must lie in (0,1), got {}",
                self.zeta_d
            )));
        }
        if self.gamma_f < 2 {
            return Err(Error::InvalidConfig(format!(
                "gamma_f must be at least 2, got {}",
                self.gamma_f
            )));
        }
        if !(self.gamma_alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma_alpha must be positive, got {}",
                self.gamma_alpha
            )));
        }
        if self.f_max < self.f {
            return Err(Error::InvalidConfig(format!(
                "f_max {} must be at least f {}",
                self.f_max, self.f
            )));
        }
        if !(self.alpha_min > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_min must be positive, got {}",
                self.alpha_min
            )));
        }
        Ok(())
    }
}

/// eps = s_target - s_current; positive means the model is still too dense.
pub fn sparsity_defect(s_target: f64, s_current: f64) -> f64 {
    s_target - s_current
}

/// Literal tolerance-band membership |s - s_target| <= zeta.
pub fn within_tolerance(s: f64, s_target: f64, zeta: f64) -> bool {
    (s - s_target).abs() <= zeta
}

/// Live controller state owned by a single training run.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub lambda: f64,
    pub target: f64,
    pub f: u64,
    pub alpha: f64,
    pub zeta: f64,
    pub zeta_d: f64,
    pub gamma_f: u64,
    pub gamma_alpha: f64,
    pub f_max: u64,
    pub alpha_min: f64,
    /// Step counter of the most recent controller_step call.
    pub step: u64,
    pub last_eps: f64,
    /// False disables adaptation entirely; lambda stays fixed.
    pub enabled: bool,
    pub stop_on_tolerance: bool,
    /// Latched once the tolerance band is reached with stop_on_tolerance set.
    pub stopped: bool,
}

/// Everything one controller invocation decided, for logging and for the
/// optimizer-side reactions (dual correction, rescaled prox weight).
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerEvent {
    pub k: u64,
    pub eps: f64,
    /// Whether this step was an adaptation event that moved (or could have
    /// moved) lambda.
    pub fired: bool,
    pub damped: bool,
    pub lambda_before: f64,
    pub lambda_after: f64,
    /// Interval in force when this step ran, before any damping this step.
    pub f_used: u64,
    /// Acceleration used for this step's update, before any damping.
    pub alpha_used: f64,
    /// (old, new) weights the optimizer must feed to the dual correction;
    /// present only for SubgradCorrect when lambda actually moved.
    pub correction: Option<(f64, f64)>,
    /// Rescaled-prox weight beta = lambda; present only for ProxRescale.
    pub beta: Option<f64>,
    pub stopped: bool,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig, lambda0: f64, target: f64, enabled: bool) -> Result<Self> {
        cfg.validate()?;
        if !(lambda0 >= 0.0) {
            return Err(Error::InvalidThreshold(lambda0));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidConfig(format!("target must lie in [0,1], got {target}")));
        }
        Ok(ControllerState {
            lambda: lambda0,
            target,
            f: cfg.f,
            alpha: cfg.alpha,
            zeta: cfg.zeta,
            zeta_d: cfg.zeta_d,
            gamma_f: cfg.gamma_f,
            gamma_alpha: cfg.gamma_alpha,
            f_max: cfg.f_max,
            alpha_min: cfg.alpha_min,
            step: 0,
            last_eps: 0.0,
            enabled,
            stop_on_tolerance: cfg.stop_on_tolerance,
            stopped: false,
        })
    }

    /// Multiplicative update, applied only when step k lands on the
    /// adaptation grid. sgn(0) = 0 leaves lambda untouched, so the exact
    /// target is an equilibrium. Returns whether the update fired.
    pub fn update_lambda(&mut self, eps: f64, k: u64) -> bool {
        if k % self.f != 0 {
            return false;
        }
        let factor = 1.0 + self.alpha * eps.abs();
        if eps > 0.0 {
            self.lambda *= factor;
        } else if eps < 0.0 {
            self.lambda /= factor;
        }
        true
    }

    /// Damping rule: once the defect is inside the zeta_d band, make updates
    /// rarer (grow f, capped) and smaller (shrink alpha, floored). Returns
    /// whether it changed anything.
    pub fn apply_damping(&mut self, eps: f64) -> bool {
        if eps.abs() > self.zeta_d {
            return false;
        }
        self.f = (self.f.saturating_mul(self.gamma_f)).min(self.f_max);
        self.alpha = (self.gamma_alpha * self.alpha).max(self.alpha_min);
        true
    }

    /// One controller invocation for training step k (0-based). Measures the
    /// defect, updates lambda on adaptation events, applies damping at most
    /// once per event, and reports what the optimizer must do about it.
    pub fn controller_step(&mut self, s_current: f64, k: u64, variant: Variant) -> ControllerEvent {
        let eps = sparsity_defect(self.target, s_current);
        self.step = k;
        self.last_eps = eps;
        let lambda_before = self.lambda;
        let f_used = self.f;
        let alpha_used = self.alpha;
        let mut fired = false;
        let mut damped = false;
        if self.enabled && !self.stopped && k % self.f == 0 {
            if self.stop_on_tolerance && within_tolerance(s_current, self.target, self.zeta) {
                self.stopped = true;
            } else {
                fired = self.update_lambda(eps, k);
                damped = self.apply_damping(eps);
            }
        }
        let lambda_after = self.lambda;
        let correction = if variant == Variant::SubgradCorrect && fired && lambda_after != lambda_before
        {
            Some((lambda_before, lambda_after))
        } else {
            None
        };
        let beta = if variant == Variant::ProxRescale { Some(lambda_after) } else { None };
        ControllerEvent {
            k,
            eps,
            fired,
            damped,
            lambda_before,
            lambda_after,
            f_used,
            alpha_used,
            correction,
            beta,
            stopped: self.stopped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lambda: f64, target: f64) -> ControllerState {
        ControllerState::new(&ControllerConfig::default(), lambda, target, true).unwrap()
    }

    #[test]
    fn defect_sign_convention() {
        assert!((sparsity_defect(0.90, 0.80) - 0.10).abs() < 1e-15);
        assert_eq!(sparsity_defect(0.90, 0.90), 0.0);
        assert!((sparsity_defect(0.75, 0.99) + 0.24).abs() < 1e-15);
    }

    #[test]
    fn update_examples() {
        let mut st = state(1.0, 0.9);
        assert!(st.update_lambda(0.1, 0));
        assert!((st.lambda - 1.1).abs() < 1e-15);

        let mut st = state(1.0, 0.9);
        st.update_lambda(-0.1, 0);
        assert!((st.lambda - 1.0 / 1.1).abs() < 1e-15);
        assert!((st.lambda - 0.909091).abs() < 1e-6);

        let mut st = state(1.0, 0.9);
        st.update_lambda(0.0, 0);
        assert_eq!(st.lambda, 1.0);

        // Off-grid step leaves lambda alone.
        let mut st = state(1.0, 0.9);
        assert!(!st.update_lambda(0.5, 7));
        assert_eq!(st.lambda, 1.0);
    }

    #[test]
    fn damping_examples() {
        let mut st = state(1.0, 0.9);
        assert_eq!((st.f, st.alpha), (50, 1.0));
        assert!(st.apply_damping(0.003));
        assert_eq!(st.f, 100);
        assert!((st.alpha - 0.1).abs() < 1e-15);

        assert!(!st.apply_damping(0.02));
        assert_eq!(st.f, 100);

        let mut st = state(1.0, 0.9);
        st.f_max = 800;
        for _ in 0..10 {
            st.apply_damping(0.0);
        }
        assert_eq!(st.f, 800);
        assert!((st.alpha - st.alpha_min).abs() < 1e-15);
    }

    #[test]
    fn tolerance_band() {
        assert!(within_tolerance(0.893, 0.90, 0.01));
        assert!(!within_tolerance(0.88, 0.90, 0.01));
        assert!(within_tolerance(0.90, 0.90, 0.0));
    }

    #[test]
    fn closed_loop_on_monotone_response_reaches_band() {
        // Synthetic plant s(lambda) = 1 - exp(-lambda); target 0.9 is hit at
        // lambda = ln(10). Per-step adaptation from far below.
        let mut cfg = ControllerConfig::default();
        cfg.f = 1;
        let mut st = ControllerState::new(&cfg, 0.01, 0.9, true).unwrap();
        let mut reached = None;
        for k in 0..200u64 {
            let s = 1.0 - (-st.lambda).exp();
            let ev = st.controller_step(s, k, Variant::Plain);
            if ev.eps.abs() <= 0.01 {
                reached = Some(k);
                break;
            }
        }
        let k = reached.expect("never reached the tolerance band");
        assert!(k < 200);
    }

    #[test]
    fn equilibrium_holds_lambda_constant() {
        let mut st = state(0.7, 0.9);
        for k in 0..300u64 {
            let ev = st.controller_step(0.9, k, Variant::Plain);
            assert_eq!(ev.lambda_after, 0.7);
        }
        assert_eq!(st.lambda, 0.7);
    }

    #[test]
    fn huge_interval_only_moves_lambda_at_step_zero() {
        let mut cfg = ControllerConfig::default();
        cfg.f = u64::MAX / 4;
        cfg.f_max = u64::MAX / 2;
        let mut st = ControllerState::new(&cfg, 1.0, 0.9, true).unwrap();
        let ev0 = st.controller_step(0.5, 0, Variant::Plain);
        assert!(ev0.fired);
        let lambda_after_first = st.lambda;
        assert!(lambda_after_first > 1.0);
        for k in 1..2000u64 {
            let ev = st.controller_step(0.1, k, Variant::Plain);
            assert!(!ev.fired);
            assert_eq!(ev.lambda_after, lambda_after_first);
        }
    }

    #[test]
    fn disabled_controller_never_fires() {
        let mut st = ControllerState::new(&ControllerConfig::default(), 0.5, 0.9, false).unwrap();
        for k in 0..120u64 {
            let ev = st.controller_step(0.2, k, Variant::Plain);
            assert!(!ev.fired);
            assert_eq!(ev.lambda_after, 0.5);
            // The defect is still measured for logging.
            assert!((ev.eps - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_on_tolerance_latches() {
        let mut cfg = ControllerConfig::default();
        cfg.f = 1;
        cfg.stop_on_tolerance = true;
        let mut st = ControllerState::new(&cfg, 0.8, 0.9, true).unwrap();
        // Outside the band: still adapting.
        let ev = st.controller_step(0.5, 0, Variant::Plain);
        assert!(ev.fired && !ev.stopped);
        // Inside the band: latch and freeze.
        let ev = st.controller_step(0.895, 1, Variant::Plain);
        assert!(!ev.fired && ev.stopped);
        let frozen = st.lambda;
        // Out-of-band drift afterwards must not wake the controller.
        let ev = st.controller_step(0.2, 2, Variant::Plain);
        assert!(!ev.fired && ev.stopped);
        assert_eq!(st.lambda, frozen);
    }

    #[test]
    fn event_payload_tracks_variant() {
        let mut st = state(1.0, 0.9);
        let ev = st.controller_step(0.8, 0, Variant::SubgradCorrect);
        assert!(ev.fired);
        let (old, new) = ev.correction.unwrap();
        assert_eq!(old, 1.0);
        assert!((new - 1.1).abs() < 1e-15);
        assert_eq!(ev.beta, None);

        // Equilibrium: no correction needed even though the event fired.
        let mut st = state(1.0, 0.9);
        let ev = st.controller_step(0.9, 0, Variant::SubgradCorrect);
        assert!(ev.fired);
        assert_eq!(ev.correction, None);

        let mut st = state(1.0, 0.9);
        let ev = st.controller_step(0.8, 0, Variant::ProxRescale);
        assert_eq!(ev.beta, Some(ev.lambda_after));

        let mut st = state(1.0, 0.9);
        let ev = st.controller_step(0.8, 0, Variant::Plain);
        assert_eq!(ev.correction, None);
        assert_eq!(ev.beta, None);
    }

    #[test]
    fn event_logs_pre_damping_knobs() {
        let mut cfg = ControllerConfig::default();
        cfg.f = 1;
        let mut st = ControllerState::new(&cfg, 1.0, 0.9, true).unwrap();
        // Defect inside the damping band: update uses alpha = 1, then damps.
        let ev = st.controller_step(0.897, 0, Variant::Plain);
        assert!(ev.fired && ev.damped);
        assert_eq!(ev.f_used, 1);
        assert_eq!(ev.alpha_used, 1.0);
        assert_eq!(st.f, 2);
        assert!((st.alpha - 0.1).abs() < 1e-15);
        // The multiplicative move used the pre-damping alpha.
        let rel = (ev.lambda_after - ev.lambda_before).abs() / ev.lambda_before;
        assert!((rel - 1.0 * ev.eps.abs()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let ok = ControllerConfig::default();
        assert!(ok.validate().is_ok());
        let bad = ControllerConfig { f: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { alpha: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { gamma_f: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { f_max: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { lambda0: Some(-1.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { zeta: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(ControllerState::new(&ok, 0.1, 1.5, true).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ControllerConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ControllerConfig::default());
        assert_eq!(cfg.f, 50);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.gamma_f, 2);
        assert!((cfg.gamma_alpha - 0.1).abs() < 1e-15);
        assert_eq!(cfg.f_max, 6400);
        let cfg: ControllerConfig =
            serde_json::from_str(r#"{"f": 10, "gamma_alpha": 10.0}"#).unwrap();
        assert_eq!(cfg.f, 10);
        assert_eq!(cfg.gamma_alpha, ControllerConfig::GAMMA_ALPHA_LITERAL);
        assert!(serde_json::from_str::<ControllerConfig>(r#"{"nope": 1}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(96))]

            #[test]
            fn bounded_relative_change(
                lambda in 1e-4..10.0f64,
                alpha in 0.01..2.0f64,
                eps in -1.0..1.0f64,
            ) {
                let mut cfg = ControllerConfig::default();
                cfg.f = 1;
                cfg.alpha = alpha;
                let mut st = ControllerState::new(&cfg, lambda, 0.9, true).unwrap();
                st.update_lambda(eps, 0);
                let rel = (st.lambda - lambda).abs() / lambda;
                prop_assert!(rel <= alpha * eps.abs() + 1e-12);
                if eps >= 0.0 {
                    prop_assert!((rel - alpha * eps.abs()).abs() < 1e-10);
                } else {
                    let want = alpha * eps.abs() / (1.0 + alpha * eps.abs());
                    prop_assert!((rel - want).abs() < 1e-10);
                }
                prop_assert!(st.lambda > 0.0);
            }

            #[test]
            fn envelope_positivity_and_damping_monotonicity(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cfg = ControllerConfig::default();
                cfg.f = 1 + (seed % 4);
                let lambda0 = 0.5;
                let mut st = ControllerState::new(&cfg, lambda0, 0.9, true).unwrap();
                let mut lo = lambda0;
                let mut hi = lambda0;
                let mut prev_f = st.f;
                let mut prev_alpha = st.alpha;
                for k in 0..400u64 {
                    let s = rng.random_range(0.0..1.0);
                    let alpha_used = st.alpha;
                    let ev = st.controller_step(s, k, Variant::Plain);
                    if ev.fired {
                        let growth = 1.0 + alpha_used * ev.eps.abs();
                        lo /= growth;
                        hi *= growth;
                    }
                    prop_assert!(st.lambda > 0.0);
                    prop_assert!(st.lambda >= lo - 1e-12 && st.lambda <= hi + 1e-12,
                        "lambda {} escaped envelope [{}, {}]", st.lambda, lo, hi);
                    prop_assert!(st.f >= prev_f, "f decreased");
                    prop_assert!(st.alpha <= prev_alpha + 1e-15, "alpha increased");
                    prev_f = st.f;
                    prev_alpha = st.alpha;
                }
            }
        }
    }
}
