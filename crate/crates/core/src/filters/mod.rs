//! Safety filters: passthrough, the nominal predictive filter, the learnable
//! QP filter and the MLP baseline.

mod checkpoint;
mod lqp;
mod mlp;
mod psf;

pub use checkpoint::{Checkpoint, CheckpointMetadata, LqpCheckpoint, MlpCheckpoint};
pub use lqp::{
    default_log_std, lqp_backward, lqp_backward_batch, lqp_forward, ConvergedOutput, LqpGradients, LqpParams,
    LqpPrepared, UnrollTape, DEFAULT_M_QP, DEFAULT_N_QP,
};
pub use mlp::{flatten, mlp_forward, Layer, Mlp, MlpPolicy, MlpTape, DEFAULT_HIDDEN};
pub use psf::{psf_filter, solve_exact, PSF_KKT_TOL, PSF_MARGIN};

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{LtiModel, SafetySpec};
use crate::qp::{DEFAULT_ALPHA, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Unrolled PDHG depth.
    pub n_iter: usize,
    pub alpha: f64,
    /// Ridge on the non-leading blocks of `P`.
    pub eps: f64,
    /// Prediction horizon of the baseline filter.
    pub horizon: usize,
    /// Convergence tolerance when a learned filter is deployed to convergence.
    pub deploy_tol: f64,
    pub deploy_max_iter: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_iter: 10,
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
            horizon: 4,
            deploy_tol: 1e-9,
            deploy_max_iter: 1_000_000,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.deploy_tol > 0.0) {
            return Err(Error::InvalidArgument("deploy_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Maps a state and a proposed input to the input actually applied.
pub trait SafetyFilter: Send + Sync {
    fn name(&self) -> &str;

    /// Errors of kind [`Error::FilterFailure`] are recoverable: the caller
    /// applies `u_ref` and records the failure.
    fn apply(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

pub fn passthrough(u_ref: &DVector<f64>) -> DVector<f64> {
    u_ref.clone()
}

impl SafetyFilter for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }
    fn apply(&self, _x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(passthrough(u_ref))
    }
}

#[derive(Debug, Clone)]
pub struct PsfFilter {
    pub model: LtiModel,
    pub spec: SafetySpec,
    pub cfg: FilterConfig,
}

impl SafetyFilter for PsfFilter {
    fn name(&self) -> &str {
        "psf"
    }
    fn apply(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>> {
        psf_filter(&self.model, &self.spec, x0, u_ref, &self.cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LqpMode {
    /// Exactly the configured number of iterations, as in training.
    Unrolled,
    /// Iterate until converged; non-convergence is a filter failure.
    Converged { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone)]
pub struct LqpFilter {
    pub prepared: Arc<LqpPrepared>,
    pub mode: LqpMode,
}

impl LqpFilter {
    pub fn new(params: LqpParams, cfg: &FilterConfig, mode: LqpMode) -> Result<Self> {
        Ok(Self {
            prepared: LqpPrepared::new(params, cfg)?,
            mode,
        })
    }
}

impl SafetyFilter for LqpFilter {
    fn name(&self) -> &str {
        "lqp"
    }
    fn apply(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>> {
        match self.mode {
            LqpMode::Unrolled => Ok(self.prepared.forward(x0, u_ref)?.u0),
            LqpMode::Converged { tol, max_iter } => {
                let out = self.prepared.solve_converged(x0, u_ref, tol, max_iter)?;
                if !out.converged {
                    return Err(Error::FilterFailure(format!(
                        "learned filter did not converge in {max_iter} iterations"
                    )));
                }
                Ok(out.u0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpFilter(pub MlpPolicy);

impl SafetyFilter for MlpFilter {
    fn name(&self) -> &str {
        "mlp"
    }
    fn apply(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x0", self.0.n_sys(), x0.len())?;
        mlp_forward(&self.0, x0, u_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passthrough_is_identity() {
        let u = DVector::from_column_slice(&[0.3]);
        assert_eq!(Passthrough.apply(&DVector::zeros(2), &u).unwrap(), u);
        assert_eq!(passthrough(&DVector::zeros(1)), DVector::zeros(1));
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let c: FilterConfig = serde_json::from_str(r#"{"n_iter": 3}"#).unwrap();
        assert_eq!(c.n_iter, 3);
        assert_eq!(c.horizon, 4);
        assert!(serde_json::from_str::<FilterConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = FilterConfig { alpha: 0.0, ..c };
        assert!(bad.validate().is_err());
    }
}
