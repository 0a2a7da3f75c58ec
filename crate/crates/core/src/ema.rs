//! Teacher averaging and the dual-teacher update schedule.
//!
//! `θ_teacher ← π·θ_teacher + (1 − π)·θ_student`. The dynamic teacher uses
//! a large π and updates every `n_update` iterations; the static teacher uses
//! a smaller π and updates once per epoch, so it takes bigger but rarer steps.

use serde::{Deserialize, Serialize};

use crate::detector::ModelParameters;
use crate::error::{Error, Result};

fn check(teacher: &ModelParameters, student: &ModelParameters, pi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::Contract(format!("momentum {pi} outside [0, 1]")));
    }
    teacher.check_schema(student)
}

/// Fresh parameter set `pi * teacher + (1 - pi) * student`.
pub fn ema_update(teacher: &ModelParameters, student: &ModelParameters, pi: f64) -> Result<ModelParameters> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, pi)?;
    Ok(out)
}

/// In-place form of [`ema_update`]; bit-identical results.
pub fn ema_update_in_place(teacher: &mut ModelParameters, student: &ModelParameters, pi: f64) -> Result<()> {
    check(teacher, student, pi)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = pi * *tv + (1.0 - pi) * sv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSchedule {
    pub pi_dynamic: f64,
    pub pi_static: f64,
    /// Iterations between dynamic-teacher updates; 0 means
    /// `max(1, dataset_size / 10)`.
    pub n_update: usize,
}

impl Default for TeacherSchedule {
    fn default() -> Self {
        TeacherSchedule {
            pi_dynamic: 0.99,
            pi_static: 0.6,
            n_update: 0,
        }
    }
}

impl TeacherSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.pi_static && self.pi_static <= self.pi_dynamic && self.pi_dynamic <= 1.0) {
            return Err(Error::Config(format!(
                "momenta must satisfy 0 <= pi_static ({}) <= pi_dynamic ({}) <= 1",
                self.pi_static, self.pi_dynamic
            )));
        }
        Ok(())
    }

    pub fn update_interval(&self, dataset_size: usize) -> usize {
        if self.n_update > 0 {
            self.n_update
        } else {
            (dataset_size / 10).max(1)
        }
    }
}

/// Student plus its two EMA teachers.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTeacherState {
    pub static_params: ModelParameters,
    pub dynamic_params: ModelParameters,
    pub student_params: ModelParameters,
    pub iteration: u64,
    pub epoch: u64,
}

/// Which teachers a [`DualTeacherState::tick`] moved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TickEvents {
    pub dynamic_updated: bool,
    pub static_updated: bool,
}

impl DualTeacherState {
    /// All three models start as copies of `init`.
    pub fn new(init: &ModelParameters) -> Self {
        DualTeacherState {
            static_params: init.clone(),
            dynamic_params: init.clone(),
            student_params: init.clone(),
            iteration: 0,
            epoch: 0,
        }
    }

    /// Advance one iteration: the dynamic teacher updates when the new
    /// iteration count is a multiple of `n_update`, the static teacher when
    /// `epoch_ended`.
    pub fn tick(&mut self, schedule: &TeacherSchedule, n_update: usize, epoch_ended: bool) -> Result<TickEvents> {
        if n_update == 0 {
            return Err(Error::Config("n_update must be at least 1".into()));
        }
        self.iteration += 1;
        let mut events = TickEvents::default();
        if self.iteration % n_update as u64 == 0 {
            ema_update_in_place(&mut self.dynamic_params, &self.student_params, schedule.pi_dynamic)?;
            events.dynamic_updated = true;
        }
        if epoch_ended {
            ema_update_in_place(&mut self.static_params, &self.student_params, schedule.pi_static)?;
            self.epoch += 1;
            events.static_updated = true;
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Tensor;
    use std::collections::BTreeMap;

    fn scalar(v: f64) -> ModelParameters {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(v));
        ModelParameters::new(m).unwrap()
    }

    #[test]
    fn boundary_momenta() {
        let (t, s) = (scalar(1.0), scalar(0.0));
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert!((ema_update(&t, &s, 0.9).unwrap().get("w").data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn geometric_approach() {
        let s = scalar(2.0);
        let mut t = scalar(-3.0);
        for _ in 0..20 {
            let before = (t.get("w").data[0] - 2.0).abs();
            t = ema_update(&t, &s, 0.7).unwrap();
            let after = (t.get("w").data[0] - 2.0).abs();
            assert!((after - 0.7 * before).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut other = BTreeMap::new();
        other.insert("v".to_string(), Tensor::scalar(0.0));
        let other = ModelParameters::new(other).unwrap();
        assert!(ema_update(&scalar(0.0), &other, 0.5).is_err());
        assert!(ema_update(&scalar(0.0), &scalar(1.0), 1.5).is_err());
        let bad = TeacherSchedule {
            pi_dynamic: 0.5,
            pi_static: 0.9,
            n_update: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dynamic_cadence() {
        let schedule = TeacherSchedule::default();
        let mut state = DualTeacherState::new(&scalar(1.0));
        state.student_params = scalar(0.0);
        for _ in 1..50 {
            let ev = state.tick(&schedule, 50, false).unwrap();
            assert!(!ev.dynamic_updated);
            assert_eq!(state.dynamic_params, scalar(1.0));
        }
        assert!(state.tick(&schedule, 50, false).unwrap().dynamic_updated);
        assert_eq!(state.dynamic_params, ema_update(&scalar(1.0), &scalar(0.0), 0.99).unwrap());
        assert_eq!(state.static_params, scalar(1.0));
        state.tick(&schedule, 50, true).unwrap();
        assert!((state.static_params.get("w").data[0] - 0.6).abs() < 1e-15);
    }
}
