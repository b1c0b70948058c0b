//! EMA teacher with a linear decay ramp.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::params::Params;

/// Final EMA decay reached at the end of the ramp.
pub const MU_MAX: f64 = 0.9998;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub mu0: f64,
    pub mu_n: u64,
    pub mu_max: f64,
}

impl EmaSchedule {
    pub fn new(mu0: f64, mu_n: u64) -> Result<Self> {
        let s = Self { mu0, mu_n, mu_max: MU_MAX };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mu0 && self.mu0 <= self.mu_max && self.mu_max < 1.0) {
            return Err(invalid_config(format!(
                "EMA decay must satisfy 0 <= mu0 ({}) <= mu_max ({}) < 1",
                self.mu0, self.mu_max
            )));
        }
        if self.mu_n == 0 {
            return Err(invalid_config("EMA ramp length must be at least 1"));
        }
        Ok(())
    }

    pub fn decay_at(&self, step: u64) -> f64 {
        decay_at(step, self.mu0, self.mu_n, self.mu_max)
    }
}

/// `μ = μ0 + min(step, μn)/μn · (μmax − μ0)`
pub fn decay_at(step: u64, mu0: f64, mu_n: u64, mu_max: f64) -> f64 {
    if step >= mu_n {
        return mu_max;
    }
    mu0 + (step as f64 / mu_n as f64) * (mu_max - mu0)
}

/// Averaged parameter copy `Δ` with its update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub delta: Params,
    pub step: u64,
    pub schedule: EmaSchedule,
}

impl TeacherState {
    /// `Δ = θ`, step 0.
    pub fn init(theta: &Params, schedule: EmaSchedule) -> Self {
        Self { delta: theta.clone(), step: 0, schedule }
    }

    pub fn current_decay(&self) -> f64 {
        self.schedule.decay_at(self.step)
    }

    /// `Δ ← μΔ + (1−μ)θ` with the scheduled `μ`, then advances the step.
    pub fn update(&mut self, theta: &Params) -> Result<()> {
        let mu = self.current_decay();
        self.update_with_decay(theta, mu)
    }

    /// Same as [`update`](Self::update) with an explicit decay.
    pub fn update_with_decay(&mut self, theta: &Params, mu: f64) -> Result<()> {
        self.delta.check_same_structure(theta)?;
        for (d, t) in self.delta.tensors_mut().iter_mut().zip(theta.tensors()) {
            for (dv, &tv) in d.data.iter_mut().zip(&t.data) {
                *dv = mu * *dv + (1.0 - mu) * tv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamId, Tensor};

    fn scalar(v: f64) -> Params {
        let mut p = Params::new();
        let id = p.push(Tensor::zeros("x", &[1]));
        p.get_mut(id)[0] = v;
        p
    }

    #[test]
    fn init_copies_exactly() {
        let theta = scalar(0.123_456_789);
        let t = TeacherState::init(&theta, EmaSchedule::new(0.99, 100).unwrap());
        assert!(t.delta.bitwise_eq(&theta));
        assert_eq!(t.step, 0);
    }

    #[test]
    fn ramp_values() {
        assert_eq!(decay_at(0, 0.99, 100, MU_MAX), 0.99);
        assert_eq!(decay_at(100, 0.99, 100, MU_MAX), MU_MAX);
        assert_eq!(decay_at(5000, 0.99, 100, MU_MAX), MU_MAX);
        assert!((decay_at(50, 0.99, 100, MU_MAX) - 0.9949).abs() < 1e-12);
        let mut prev = 0.0;
        for s in 0..250 {
            let m = decay_at(s, 0.9, 200, MU_MAX);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn forced_decays() {
        let sched = EmaSchedule::new(0.99, 10).unwrap();
        let mut t = TeacherState::init(&scalar(1.0), sched);
        t.update_with_decay(&scalar(0.0), 1.0).unwrap();
        assert_eq!(t.delta.get(ParamId(0))[0], 1.0);
        t.update_with_decay(&scalar(0.25), 0.0).unwrap();
        assert_eq!(t.delta.get(ParamId(0))[0], 0.25);
        let mut t = TeacherState::init(&scalar(1.0), sched);
        t.update_with_decay(&scalar(0.0), 0.9).unwrap();
        assert!((t.delta.get(ParamId(0))[0] - 0.9).abs() < 1e-15);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let mut t = TeacherState::init(&scalar(1.0), EmaSchedule::new(0.5, 1).unwrap());
        let mut other = Params::new();
        other.push(Tensor::zeros("y", &[1]));
        assert!(t.update(&other).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(EmaSchedule::new(0.99995, 10).is_err());
        assert!(EmaSchedule::new(0.9, 0).is_err());
        assert!(EmaSchedule::new(-0.1, 10).is_err());
    }
}
