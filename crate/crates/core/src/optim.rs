//! Bias-corrected Adam, the warmup+cosine learning-rate schedule, and the
//! post-step constraint hooks (tau floor, DFN filter renormalization).

use serde::{Deserialize, Serialize};

use crate::dfn::renormalize_filter;
use crate::error::{ConfigError, TrainError};
use crate::params::{ParamId, ParamSet};
use crate::swin::TAU_FLOOR;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.lr <= 0.0 {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0,1)"));
            }
        }
        if self.eps <= 0.0 {
            return bad(format!("eps {} must be > 0", self.eps));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0,1]", self.warmup_frac));
        }
        Ok(())
    }
}

/// First/second moment buffers per parameter plus the step counter.
pub struct AdamState<T: Scalar> {
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m, v }
    }
}

/// Parameters that get projected after every optimizer step: log-tau values
/// floored at ln(0.01) and bank filters renormalized to unit L2.
#[derive(Debug, Clone, Default)]
pub struct ConstraintHooks {
    pub log_tau: Vec<ParamId>,
    pub dfn_filters: Vec<ParamId>,
}

impl ConstraintHooks {
    pub fn apply<T: Scalar>(&self, params: &mut ParamSet<T>) {
        let floor = T::from_f64(TAU_FLOOR.ln());
        for &id in &self.log_tau {
            for v in params.get_mut(id).data_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
        for &id in &self.dfn_filters {
            renormalize_filter(params.get_mut(id));
        }
    }
}

/// One bias-corrected Adam update over `grads` (missing parameters are
/// treated as zero-gradient), followed by the constraint hooks. A non-finite
/// gradient rejects the whole step, leaving parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimConfig,
    hooks: &ConstraintHooks,
) -> Result<(), TrainError> {
    let mut dense: Vec<Option<&Tensor<T>>> = vec![None; params.len()];
    for (id, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                name: params.name(*id).to_string(),
            });
        }
        assert_eq!(
            g.shape(),
            params.get(*id).shape(),
            "gradient shape mismatch for {}",
            params.name(*id)
        );
        dense[id.0] = Some(g);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for idx in 0..params.len() {
        let id = ParamId(idx);
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let theta = params.get_mut(id).data_mut();
        for j in 0..theta.len() {
            let g = dense[idx].map_or(0.0, |t| t.data()[j].as_f64());
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * g * g;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            theta[j] = T::from_f64(theta[j].as_f64() - delta);
        }
    }
    hooks.apply(params);
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { base_lr } else { 0.0 };
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1);
    let phase = (step - warmup_steps.min(step)) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (ParamSet<f64>, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::scalar(v));
        (ps, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut ps, id) = single_param(0.0);
        let mut st = AdamState::new(&ps);
        let cfg = OptimConfig::default();
        adam_step(
            &mut ps,
            &[(id, Tensor::scalar(1.0))],
            &mut st,
            1e-3,
            &cfg,
            &ConstraintHooks::default(),
        )
        .unwrap();
        let got = ps.get(id).item();
        assert!((got + 1e-3).abs() < 1e-11, "{got}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut ps, id) = single_param(0.7);
        let mut st = AdamState::new(&ps);
        adam_step(
            &mut ps,
            &[(id, Tensor::scalar(0.0))],
            &mut st,
            1e-3,
            &OptimConfig::default(),
            &ConstraintHooks::default(),
        )
        .unwrap();
        assert_eq!(ps.get(id).item(), 0.7);
    }

    #[test]
    fn matches_scalar_oracle_over_many_steps() {
        let (mut ps, id) = single_param(0.5);
        let mut st = AdamState::new(&ps);
        let cfg = OptimConfig::default();

        // independent scalar Adam
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut rngstate = 0x9e3779b97f4a7c15u64;
        for t in 1..=100 {
            rngstate = rngstate.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let g = ((rngstate >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);

            adam_step(
                &mut ps,
                &[(id, Tensor::scalar(g))],
                &mut st,
                cfg.lr,
                &cfg,
                &ConstraintHooks::default(),
            )
            .unwrap();
        }
        assert!((ps.get(id).item() - theta).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let (mut ps, id) = single_param(0.5);
        let mut st = AdamState::new(&ps);
        let err = adam_step(
            &mut ps,
            &[(id, Tensor::scalar(f64::NAN))],
            &mut st,
            1e-3,
            &OptimConfig::default(),
            &ConstraintHooks::default(),
        );
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
        assert_eq!(ps.get(id).item(), 0.5, "parameters untouched");
        assert_eq!(st.step, 0, "step counter untouched");
    }

    #[test]
    fn hooks_floor_tau_and_renormalize_filters() {
        let mut ps = ParamSet::<f64>::new();
        let tau = ps.register("log_tau", Tensor::new(vec![2], vec![-9.0, 1.0]).unwrap());
        let filt = ps.register("f", Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap());
        let hooks = ConstraintHooks {
            log_tau: vec![tau],
            dfn_filters: vec![filt],
        };
        hooks.apply(&mut ps);
        assert!((ps.get(tau).data()[0] - TAU_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(ps.get(tau).data()[1], 1.0);
        let norm: f64 = ps.get(filt).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1e-3, 10), 0.0);
        assert!((lr_schedule(10, 100, 1e-3, 10) - 1e-3).abs() < 1e-18);
        assert!(lr_schedule(100, 100, 1e-3, 10).abs() < 1e-12);
        // halfway through decay: half the base rate
        let mid = lr_schedule(55, 100, 1e-3, 10);
        assert!((mid - 5e-4).abs() < 1e-12);
        // no warmup
        assert!((lr_schedule(0, 100, 1e-3, 0) - 1e-3).abs() < 1e-18);
    }
}
