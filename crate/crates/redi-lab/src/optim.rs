//! Learning-rate schedule, parameter update rules, and a convergence probe.
//!
//! The schedule is linear warmup followed by linear decay, fully determined
//! by four numbers so that any step's rate can be recomputed exactly from
//! the run config. The update rules operate on flat `f64` parameter
//! vectors: a bias-corrected AdamW with decoupled weight decay, and a plain
//! gradient-descent mode used by analytic step-count experiments where the
//! adaptive machinery would obscure the arithmetic.
//!
//! Every step returns the Euclidean norm of the parameter change it
//! applied, which the trainer logs as `update_norm`.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Euclidean norm of a flat vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Linear warmup to `eta_max` over `warmup_steps`, then linear decay to
/// `eta_min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub eta_max: f64,
    pub eta_min: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.eta_min.is_finite() && self.eta_max.is_finite()) {
            return Err(Error::Config("schedule rates must be finite".into()));
        }
        if self.eta_min < 0.0 || self.eta_min > self.eta_max {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= eta_max, got eta_min {} eta_max {}",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based step index, valid through
    /// `total_steps` inclusive).
    ///
    /// With `W = warmup_steps` and `K = total_steps`:
    /// * warmup, taken when `W > 0` and `step <= W`:
    ///   `eta_min + (step/W) * (eta_max - eta_min)`, so the rate is exactly
    ///   `eta_max` at `step = W`;
    /// * decay, taken when `K > W`:
    ///   `eta_max - ((step-W)/(K-W)) * (eta_max - eta_min)`, reaching
    ///   exactly `eta_min` at `step = K`;
    /// * the remaining corner (`K = W = 0`) pins the rate at `eta_max`.
    ///
    /// A constant-rate schedule is the `eta_min = eta_max` instance.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "step {} is past the end of the schedule ({} steps)",
                step, self.total_steps
            )));
        }
        let span = self.eta_max - self.eta_min;
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            Ok(self.eta_min + frac * span)
        } else if self.total_steps > self.warmup_steps {
            let frac =
                (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            Ok(self.eta_max - frac * span)
        } else {
            Ok(self.eta_max)
        }
    }
}

/// Which update rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
    Gd,
}

impl OptimizerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Gd => "gd",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "adamw" => Ok(OptimizerKind::AdamW),
            "gd" => Ok(OptimizerKind::Gd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    /// Pure `theta <- theta - lr * grad`, no momentum and no decay.
    pub fn plain_gd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Gd,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "moment decays must lie in [0, 1), got beta1 {} beta2 {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Mutable optimizer state: step counter plus first/second moment buffers
/// (allocated even in GD mode, where they stay zero).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: OptimizerConfig,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            cfg,
            step_count: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update in place and returns the Euclidean norm of the
    /// parameter change.
    ///
    /// If any gradient entry is non-finite the step fails with
    /// [`Error::NonFinite`] and neither the parameters nor the optimizer
    /// state are touched, so the caller can fault the run while keeping
    /// the last good checkpoint intact.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Range(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {}; parameters left untouched",
                grad[i]
            )));
        }
        let mut sq_change = 0.0;
        match self.cfg.kind {
            OptimizerKind::Gd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    let delta = -lr * (g + self.cfg.weight_decay * *p);
                    *p += delta;
                    sq_change += delta * delta;
                }
            }
            OptimizerKind::AdamW => {
                let t = self.step_count + 1;
                let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
                let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
                    self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    let delta = -lr
                        * (m_hat / (v_hat.sqrt() + self.cfg.epsilon)
                            + self.cfg.weight_decay * params[i]);
                    params[i] += delta;
                    sq_change += delta * delta;
                }
            }
        }
        self.step_count += 1;
        Ok(sq_change.sqrt())
    }
}

/// Tracks the running minimum of the squared gradient norm, the quantity
/// analytic step-count experiments bound.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceProbe {
    best: Option<f64>,
}

impl ConvergenceProbe {
    pub fn new() -> Self {
        ConvergenceProbe::default()
    }

    pub fn observe(&mut self, squared_grad_norm: f64) {
        self.best = Some(match self.best {
            Some(best) => best.min(squared_grad_norm),
            None => squared_grad_norm,
        });
    }

    pub fn min_squared_grad(&self) -> Option<f64> {
        self.best
    }

    /// True once any observed squared gradient norm was at most `eps`.
    /// With no observations yet the probe reports not converged.
    pub fn converged(&self, eps: f64) -> bool {
        matches!(self.best, Some(best) if best <= eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(total: u64, warmup: u64, eta_max: f64, eta_min: f64) -> Schedule {
        Schedule {
            total_steps: total,
            warmup_steps: warmup,
            eta_max,
            eta_min,
        }
    }

    #[test]
    fn schedule_worked_examples() {
        let s = sched(100, 10, 1e-6, 0.0);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-6);
        assert_eq!(s.lr_at(55).unwrap(), 5e-7);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!((s.lr_at(5).unwrap() - 5e-7).abs() < 1e-18);
    }

    #[test]
    fn schedule_without_warmup_starts_at_the_peak() {
        let s = sched(50, 0, 2e-3, 1e-3);
        assert_eq!(s.lr_at(0).unwrap(), 2e-3);
        assert_eq!(s.lr_at(50).unwrap(), 1e-3);
        assert_eq!(s.lr_at(25).unwrap(), 1.5e-3);
    }

    #[test]
    fn schedule_degenerate_corners() {
        // All-warmup schedule never decays.
        let s = sched(5, 5, 1e-3, 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 1e-3);
        assert_eq!(s.lr_at(2).unwrap(), 4e-4);
        // The zero-length schedule pins the peak rate.
        let z = sched(0, 0, 7e-4, 0.0);
        assert_eq!(z.lr_at(0).unwrap(), 7e-4);
        // Constant-rate instance.
        let c = sched(100, 10, 3e-4, 3e-4);
        for step in [0, 10, 50, 100] {
            assert_eq!(c.lr_at(step).unwrap(), 3e-4);
        }
    }

    #[test]
    fn schedule_rejects_steps_past_the_end() {
        let s = sched(100, 10, 1e-6, 0.0);
        assert!(matches!(s.lr_at(101), Err(Error::Range(_))));
    }

    #[test]
    fn schedule_validation_catches_bad_shapes() {
        assert!(sched(10, 11, 1e-3, 0.0).validate().is_err());
        assert!(sched(10, 2, 1e-4, 2e-4).validate().is_err());
        assert!(sched(10, 2, 1e-3, -1e-9).validate().is_err());
        assert!(sched(10, 2, f64::NAN, 0.0).validate().is_err());
        assert!(sched(10, 10, 1e-3, 0.0).validate().is_ok());
    }

    #[test]
    fn schedule_is_continuous_at_the_warmup_boundary() {
        let s = sched(1000, 100, 1e-3, 1e-5);
        let at_peak = s.lr_at(100).unwrap();
        let after = s.lr_at(101).unwrap();
        assert_eq!(at_peak, 1e-3);
        let decay_slope = (1e-3 - 1e-5) / 900.0;
        assert!((at_peak - after - decay_slope).abs() < 1e-18);
    }

    #[test]
    fn gd_step_is_exact_per_coordinate() {
        let mut state = OptimizerState::new(OptimizerConfig::plain_gd(), 3).unwrap();
        let mut params = vec![1.0, -2.0, 0.5];
        let grad = vec![0.5, 0.25, -1.0];
        let norm = state.step(&mut params, &grad, 0.1).unwrap();
        assert_eq!(params, vec![1.0 - 0.05, -2.0 - 0.025, 0.5 + 0.1]);
        assert!((norm - l2_norm(&[0.05, 0.025, 0.1])).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_with_zero_decay_changes_nothing() {
        for cfg in [
            OptimizerConfig::plain_gd(),
            OptimizerConfig {
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
        ] {
            let mut state = OptimizerState::new(cfg, 2).unwrap();
            let mut params = vec![3.0, -1.5];
            let norm = state.step(&mut params, &[0.0, 0.0], 0.1).unwrap();
            assert_eq!(norm, 0.0);
            assert_eq!(params, vec![3.0, -1.5]);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_multiplicatively() {
        // With a zero gradient the AdamW update reduces to
        // theta <- theta * (1 - lr * weight_decay), exactly.
        let cfg = OptimizerConfig {
            weight_decay: 1e-2,
            ..OptimizerConfig::default()
        };
        let mut state = OptimizerState::new(cfg, 2).unwrap();
        let mut params = vec![2.0, -3.0];
        state.step(&mut params, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(params, vec![2.0 * (1.0 - 1e-3), -3.0 * (1.0 - 1e-3)]);
    }

    #[test]
    fn first_adamw_step_moves_by_roughly_the_learning_rate() {
        // After bias correction the first step is
        // -lr * g / (|g| + eps), about -lr * sign(g).
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut state = OptimizerState::new(cfg, 2).unwrap();
        let mut params = vec![0.0, 0.0];
        state.step(&mut params, &[3.0, -0.004], 0.01).unwrap();
        assert!((params[0] + 0.01).abs() < 1e-8);
        assert!((params[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn gd_drives_a_quadratic_to_its_minimum() {
        let mut state = OptimizerState::new(OptimizerConfig::plain_gd(), 1).unwrap();
        let mut params = vec![5.0];
        for _ in 0..200 {
            let grad = vec![params[0]];
            state.step(&mut params, &grad, 0.1).unwrap();
        }
        assert!(params[0].abs() < 1e-8, "{}", params[0]);
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut state = OptimizerState::new(cfg, 3).unwrap();
        let mut params = vec![2.0, -1.0, 0.5];
        let loss = |p: &[f64]| 0.5 * p.iter().map(|x| x * x).sum::<f64>();
        let initial = loss(&params);
        for _ in 0..300 {
            let grad = params.clone();
            state.step(&mut params, &grad, 0.05).unwrap();
        }
        assert!(loss(&params) < 1e-3 * initial);
    }

    #[test]
    fn non_finite_gradients_fault_without_touching_state() {
        let mut state = OptimizerState::new(OptimizerConfig::default(), 3).unwrap();
        let mut params = vec![1.0, 2.0, 3.0];
        state.step(&mut params, &[0.1, 0.2, 0.3], 0.01).unwrap();
        let snapshot = params.clone();
        let moments = state.clone();
        let err = state.step(&mut params, &[0.1, f64::NAN, 0.3], 0.01);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(params, snapshot);
        assert_eq!(state.step_count(), moments.step_count());
        assert_eq!(state.m, moments.m);
        assert_eq!(state.v, moments.v);
        // The optimizer still works after the fault.
        assert!(state.step(&mut params, &[0.1, 0.2, 0.3], 0.01).is_ok());
        let inf = state.step(&mut params, &[f64::INFINITY, 0.0, 0.0], 0.01);
        assert!(matches!(inf, Err(Error::NonFinite(_))));
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let mut state = OptimizerState::new(OptimizerConfig::default(), 3).unwrap();
        let mut params = vec![1.0, 2.0];
        assert!(matches!(
            state.step(&mut params, &[0.1, 0.2], 0.01),
            Err(Error::Contract(_))
        ));
        let mut params3 = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            state.step(&mut params3, &[0.1, 0.2], 0.01),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn invalid_learning_rates_are_rejected() {
        let mut state = OptimizerState::new(OptimizerConfig::default(), 1).unwrap();
        let mut params = vec![1.0];
        assert!(matches!(
            state.step(&mut params, &[0.1], -0.01),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            state.step(&mut params, &[0.1], f64::NAN),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn optimizer_config_validation() {
        let bad_beta = OptimizerConfig {
            beta1: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(bad_beta.validate().is_err());
        let bad_eps = OptimizerConfig {
            epsilon: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(bad_eps.validate().is_err());
        let bad_wd = OptimizerConfig {
            weight_decay: -0.1,
            ..OptimizerConfig::default()
        };
        assert!(bad_wd.validate().is_err());
        assert!(OptimizerKind::from_name("adamw").is_ok());
        assert!(OptimizerKind::from_name("gd").is_ok());
        assert!(OptimizerKind::from_name("sgd").is_err());
    }

    #[test]
    fn probe_tracks_the_running_minimum() {
        let mut probe = ConvergenceProbe::new();
        assert!(!probe.converged(1e9));
        assert_eq!(probe.min_squared_grad(), None);
        for g in [4.0, 1.0, 9.0] {
            probe.observe(g);
        }
        assert_eq!(probe.min_squared_grad(), Some(1.0));
        assert!(probe.converged(2.0));
        assert!(probe.converged(1.0));
        assert!(!probe.converged(0.5));
    }

    #[test]
    fn identical_runs_produce_bitwise_identical_parameters() {
        let run = || {
            let mut state = OptimizerState::new(OptimizerConfig::default(), 4).unwrap();
            let mut params = vec![0.3, -0.7, 1.1, 0.0];
            for k in 0..50 {
                let grad: Vec<f64> = params.iter().map(|p| p - 0.01 * k as f64).collect();
                state.step(&mut params, &grad, 1e-3).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #[test]
        fn gd_matches_the_update_equation_everywhere(
            p0 in -10.0f64..10.0,
            p1 in -10.0f64..10.0,
            g0 in -10.0f64..10.0,
            g1 in -10.0f64..10.0,
            lr in 0.0f64..1.0,
        ) {
            let mut state = OptimizerState::new(OptimizerConfig::plain_gd(), 2).unwrap();
            let mut params = vec![p0, p1];
            state.step(&mut params, &[g0, g1], lr).unwrap();
            prop_assert_eq!(params[0], p0 - lr * g0);
            prop_assert_eq!(params[1], p1 - lr * g1);
        }

        #[test]
        fn adamw_keeps_parameters_finite(
            p in -100.0f64..100.0,
            g in -1000.0f64..1000.0,
            lr in 0.0f64..0.1,
        ) {
            let mut state = OptimizerState::new(OptimizerConfig::default(), 1).unwrap();
            let mut params = vec![p];
            for _ in 0..5 {
                let norm = state.step(&mut params, &[g], lr).unwrap();
                prop_assert!(norm.is_finite());
                prop_assert!(params[0].is_finite());
            }
        }

        #[test]
        fn warmup_then_decay_never_leaves_the_rate_band(
            total in 1u64..500,
            warmup_frac in 0.0f64..1.0,
            step_frac in 0.0f64..1.0,
        ) {
            let warmup = (total as f64 * warmup_frac) as u64;
            let s = sched(total, warmup, 1e-3, 1e-5);
            let step = (total as f64 * step_frac) as u64;
            let lr = s.lr_at(step).unwrap();
            prop_assert!((1e-5..=1e-3).contains(&lr));
        }
    }
}
