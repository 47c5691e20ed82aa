use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_violation, SafetySpec};

/// Weights of the per-step reward
/// `−k1·viol − k2‖û − u‖² + k3·[‖û − u‖ < δ] + k4 − k5·[terminated]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
    pub delta_min: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k1: 10.0,
            k2: 1.0,
            k3: 1.0,
            k4: 0.1,
            k5: 50.0,
            delta_min: 0.01,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let ks = [self.k1, self.k2, self.k3, self.k4, self.k5];
        if ks.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "reward weights must be nonnegative: {ks:?}"
            )));
        }
        if !(self.delta_min > 0.0) {
            return Err(Error::InvalidArgument("delta_min must be positive".into()));
        }
        Ok(())
    }
}

/// The five reward terms, in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerms {
    pub safety: f64,
    pub deviation: f64,
    pub min_intervention: f64,
    pub survival: f64,
    pub termination: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.safety + self.deviation + self.min_intervention + self.survival + self.termination
    }
}

pub fn reward_terms(
    x: &DVector<f64>,
    u: &DVector<f64>,
    u_hat: &DVector<f64>,
    spec: &SafetySpec,
    cfg: &RewardConfig,
    terminated_early: bool,
) -> Result<RewardTerms> {
    let violated = check_violation(x, u, spec)?;
    let dev = (u_hat - u).norm_squared();
    Ok(RewardTerms {
        safety: if violated { -cfg.k1 } else { 0.0 },
        deviation: -cfg.k2 * dev,
        min_intervention: if dev.sqrt() < cfg.delta_min { cfg.k3 } else { 0.0 },
        survival: cfg.k4,
        termination: if terminated_early { -cfg.k5 } else { 0.0 },
    })
}

pub fn compute_reward(
    x: &DVector<f64>,
    u: &DVector<f64>,
    u_hat: &DVector<f64>,
    spec: &SafetySpec,
    cfg: &RewardConfig,
    terminated_early: bool,
) -> Result<f64> {
    Ok(reward_terms(x, u, u_hat, spec, cfg, terminated_early)?.total())
}
