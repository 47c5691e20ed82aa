use nalgebra::DVector;

use super::FilterConfig;
use crate::error::{Error, Result};
use crate::model::{LtiModel, SafetySpec};
use crate::qp::{build_psf_qp, kkt_residuals, QpProblem};

/// KKT tolerance a baseline solve must meet to be accepted.
pub const PSF_KKT_TOL: f64 = 1e-6;

/// Back-off applied to every constraint row so that plant rounding on an
/// active boundary does not register as a strict violation.
pub const PSF_MARGIN: f64 = 1e-9;

/// Exact solution of a strictly convex QP by the Goldfarb-Idnani dual
/// active-set method. Returns `(y, multipliers)`.
pub fn solve_exact(qp: &QpProblem) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = qp.n_qp();
    let m = qp.m_qp();
    // row-major Q, and Hy + b >= 0 rewritten as (-H) y <= b
    let mut qmat: Vec<f64> = qp.p().transpose().as_slice().to_vec();
    let amat: Vec<f64> = (-qp.h()).transpose().as_slice().to_vec();
    let sol =
        quadprog::solve_qp(&mut qmat, qp.q().as_slice(), &amat, qp.b().as_slice(), 0, false).map_err(|e| match e {
            quadprog::Error::Infeasible => Error::Infeasible,
            quadprog::Error::NotPositiveDefinite => Error::NotPositiveDefinite("P"),
            other => Error::InvalidArgument(other.to_string()),
        })?;
    let y = DVector::from_vec(sol.sol);
    let mu = if sol.lagr.len() == m {
        DVector::from_vec(sol.lagr)
    } else {
        DVector::zeros(m)
    };
    debug_assert_eq!(y.len(), n);
    Ok((y, mu))
}

/// Baseline predictive safety filter: solves the horizon-`cfg.horizon` QP for
/// the nominal model exactly and returns the first input.
pub fn psf_filter(
    model: &LtiModel,
    spec: &SafetySpec,
    x0: &DVector<f64>,
    u_ref: &DVector<f64>,
    cfg: &FilterConfig,
) -> Result<DVector<f64>> {
    let nominal = build_psf_qp(model, spec, x0, u_ref, cfg.horizon, cfg.eps)?;
    let b = nominal.b().add_scalar(-PSF_MARGIN);
    let qp = QpProblem::new(nominal.p().clone(), nominal.q().clone(), nominal.h().clone(), b)?;
    let (y, mu) = match solve_exact(&qp) {
        Ok(s) => s,
        Err(Error::Infeasible) => return Err(Error::FilterFailure("predictive filter QP is infeasible".into())),
        Err(e) => return Err(e),
    };
    let res = kkt_residuals(&qp, &y, &mu)?;
    let scale = 1.0 + qp.b().amax() + qp.q().amax();
    if res.max() > PSF_KKT_TOL * scale {
        return Err(Error::FilterFailure(format!(
            "predictive filter solve inaccurate (KKT residual {:e})",
            res.max()
        )));
    }
    Ok(y.rows(0, model.m_sys()).into_owned())
}
