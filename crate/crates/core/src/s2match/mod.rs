//! Semi-supervised training: perturbations, losses, EMA teacher, optimizer
//! and the per-iteration step.

pub mod ema;
pub mod engine;
pub mod loss;
pub mod optim;
pub mod perturb;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, ProbabilityMap};
use crate::error::{Error, Result};

pub use ema::{ema_gamma, ema_update, TeacherState};
pub use engine::{train_step, StepInput, StepStats};
pub use loss::{ss_consistency_loss, supervised_loss, total_loss, ws_consistency_loss};
pub use optim::{poly_lr, AdamW};
pub use perturb::{complementary_dropout_pair, stochastic_depth_fuse, DropoutMaskPair, Mode, StochasticDepth};

/// How the stochastic-depth indicator is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdOrientation {
    /// `P(keep) = 1 - p_skip`; the rescaled branch is unbiased.
    #[default]
    Survival,
    /// `P(keep) = p_skip`, the formula read literally.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2MatchConfig {
    pub tau: f64,
    pub tau_s: f64,
    pub lambda_u: f64,
    pub p_skip: f64,
    pub sd_orientation: SdOrientation,
    pub gamma_cap: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub binarize_threshold: f64,
    pub sc_enabled: bool,
    pub sd_enabled: bool,
    pub cd_enabled: bool,
    pub seed: u64,
}

impl Default for S2MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            tau_s: 0.8,
            lambda_u: 1.0,
            p_skip: 0.5,
            sd_orientation: SdOrientation::Survival,
            gamma_cap: 0.996,
            batch_labeled: 2,
            batch_unlabeled: 2,
            lr0: 2e-4,
            epochs: 30,
            poly_power: 0.9,
            weight_decay: 0.01,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            binarize_threshold: 0.5,
            sc_enabled: true,
            sd_enabled: true,
            cd_enabled: true,
            seed: 0,
        }
    }
}

impl S2MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5 <= self.tau_s && self.tau_s <= self.tau && self.tau < 1.0) {
            return Err(Error::config(format!(
                "s2match thresholds need 0.5 <= tau_s <= tau < 1, got tau_s={} tau={}",
                self.tau_s, self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.p_skip) {
            return Err(Error::config(format!("s2match.p_skip must be in [0, 1), got {}", self.p_skip)));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::config("s2match.lambda_u must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.gamma_cap) {
            return Err(Error::config("s2match.gamma_cap must be in [0, 1)"));
        }
        if self.batch_labeled == 0 {
            return Err(Error::config("s2match.batch_labeled must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.poly_power < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("s2match.lr0 must be positive; poly_power and weight_decay non-negative"));
        }
        if !(0.0 < self.binarize_threshold && self.binarize_threshold < 1.0) {
            return Err(Error::config("s2match.binarize_threshold must be in (0, 1)"));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.adam_eps <= 0.0 {
            return Err(Error::config("s2match.adam_betas must be in [0, 1) and adam_eps positive"));
        }
        Ok(())
    }
}

/// 1 where `p >= threshold`, else 0.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::config(format!("binarize threshold must be in (0, 1), got {threshold}")));
    }
    BinaryMask::new(p.data.mapv(|v| u8::from(v >= threshold)))
}
