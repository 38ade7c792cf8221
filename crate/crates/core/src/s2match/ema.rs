//! Exponential-moving-average teacher.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    /// Number of updates applied so far.
    pub iter: u64,
}

impl TeacherState {
    pub fn from_student(student: &ParamStore) -> Self {
        let mut params = student.clone();
        params.set_all_trainable(false);
        Self { params, iter: 0 }
    }
}

/// `min(1 - 1/(iter + 1), cap)`.
pub fn ema_gamma(iter: u64, cap: f64) -> f64 {
    (1.0 - 1.0 / (iter as f64 + 1.0)).min(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaStep {
    pub gamma: f64,
}

/// `teacher <- gamma * teacher + (1 - gamma) * student` over every parameter,
/// trainable or not. Returns the gamma used.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore, iter: u64, gamma_cap: f64) -> Result<f64> {
    teacher.params.check_congruent(student)?;
    let gamma = ema_gamma(iter, gamma_cap);
    for ((_, t), (_, s)) in teacher.params.iter_mut().zip(student.iter()) {
        t.value.zip_mut_with(&s.value, |a, &b| *a = gamma * *a + (1.0 - gamma) * b);
    }
    teacher.iter = iter + 1;
    Ok(gamma)
}
