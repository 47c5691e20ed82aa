//! Primal-dual hybrid gradient iterations on the slack `z = Hy + b`.
//!
//! With `F = (I + H P⁻¹ Hᵀ)⁻¹` and `μ = F(H P⁻¹ q − b)` one step is
//!
//! ```text
//! z⁺ = Π₊((I − 2αF) z + α(I − 2F) λ − 2αμ)
//! λ⁺ = F(z + λ) + μ
//! ```
//!
//! Since `(I − 2αF) z + α(I − 2F) λ − 2αμ = z + α(λ − 2λ⁺)`, each step costs a
//! single matrix-vector product with `F`. At a fixed point `λ` is the
//! multiplier of `Hy + b >= 0` and `y = P⁻¹(Hᵀλ − q)`.

use nalgebra::{DMatrix, DVector};

use super::QpProblem;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PdhgDerived {
    pub f: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdhgState {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iteration: usize,
}

impl PdhgState {
    pub fn zeros(m_qp: usize) -> Self {
        Self {
            z: DVector::zeros(m_qp),
            lambda: DVector::zeros(m_qp),
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Exactly this many iterations, converged or not.
    Fixed(usize),
    /// Stop once the stacked `(z, λ)` update has ∞-norm below `tol`.
    ToConvergence { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdhgSolution {
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub state: PdhgState,
    pub iterations: usize,
    pub converged: bool,
}

/// `F = (I + H P⁻¹ Hᵀ)⁻¹` via Cholesky, symmetrized.
pub(crate) fn derive_f(h: &DMatrix<f64>, p_inv_ht: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h.nrows();
    let mut mtx = h * p_inv_ht;
    for i in 0..m {
        mtx[(i, i)] += 1.0;
    }
    let chol = mtx.cholesky().ok_or(Error::NotPositiveDefinite("I + H P^-1 H^T"))?;
    let f = chol.inverse();
    Ok((&f + f.transpose()) * 0.5)
}

pub fn pdhg_derive(qp: &QpProblem, alpha: f64) -> Result<PdhgDerived> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {alpha}"
        )));
    }
    let chol = qp.p_cholesky();
    let p_inv_ht = chol.solve(&qp.h().transpose());
    let f = derive_f(qp.h(), &p_inv_ht)?;
    let p_inv_q = chol.solve(qp.q());
    let mu = &f * (qp.h() * p_inv_q - qp.b());
    Ok(PdhgDerived { f, mu, alpha })
}

/// One iteration writing into the output buffers. `s` receives the
/// pre-projection signal.
#[inline]
pub(crate) fn iterate_into(
    f: &DMatrix<f64>,
    mu: &DVector<f64>,
    alpha: f64,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    z_next: &mut DVector<f64>,
    lambda_next: &mut DVector<f64>,
    s: &mut DVector<f64>,
) {
    // s doubles as scratch for z + λ
    s.copy_from(z);
    *s += lambda;
    lambda_next.copy_from(mu);
    lambda_next.gemv(1.0, f, s, 1.0);
    for i in 0..z.len() {
        let si = z[i] + alpha * (lambda[i] - 2.0 * lambda_next[i]);
        s[i] = si;
        z_next[i] = si.max(0.0);
    }
}

/// One iteration; also returns the pre-projection signal.
pub fn pdhg_step_traced(state: &PdhgState, d: &PdhgDerived) -> (PdhgState, DVector<f64>) {
    let m = state.z.len();
    let mut z = DVector::zeros(m);
    let mut lambda = DVector::zeros(m);
    let mut s = DVector::zeros(m);
    iterate_into(
        &d.f,
        &d.mu,
        d.alpha,
        &state.z,
        &state.lambda,
        &mut z,
        &mut lambda,
        &mut s,
    );
    (
        PdhgState {
            z,
            lambda,
            iteration: state.iteration + 1,
        },
        s,
    )
}

pub fn pdhg_step(state: &PdhgState, d: &PdhgDerived) -> PdhgState {
    pdhg_step_traced(state, d).0
}

/// `y = P⁻¹(Hᵀλ − q)`.
pub fn recover_primal(qp: &QpProblem, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("lambda", qp.m_qp(), lambda.len())?;
    Ok(qp.p_cholesky().solve(&(qp.h().transpose() * lambda - qp.q())))
}

pub fn pdhg_solve(qp: &QpProblem, alpha: f64, mode: SolveMode, warm_start: Option<&PdhgState>) -> Result<PdhgSolution> {
    let d = pdhg_derive(qp, alpha)?;
    pdhg_solve_derived(qp, &d, mode, warm_start)
}

pub fn pdhg_solve_derived(
    qp: &QpProblem,
    d: &PdhgDerived,
    mode: SolveMode,
    warm_start: Option<&PdhgState>,
) -> Result<PdhgSolution> {
    let m = qp.m_qp();
    let mut state = match warm_start {
        Some(w) => {
            check_dim("warm start z", m, w.z.len())?;
            check_dim("warm start lambda", m, w.lambda.len())?;
            PdhgState {
                iteration: 0,
                ..w.clone()
            }
        }
        None => PdhgState::zeros(m),
    };
    let (limit, tol) = match mode {
        SolveMode::Fixed(n) => (n, None),
        SolveMode::ToConvergence { tol, max_iter } => {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument("tolerance must be positive".into()));
            }
            (max_iter, Some(tol))
        }
    };
    let mut z = DVector::zeros(m);
    let mut lambda = DVector::zeros(m);
    let mut s = DVector::zeros(m);
    let mut converged = false;
    for _ in 0..limit {
        iterate_into(
            &d.f,
            &d.mu,
            d.alpha,
            &state.z,
            &state.lambda,
            &mut z,
            &mut lambda,
            &mut s,
        );
        let delta = z
            .iter()
            .zip(state.z.iter())
            .chain(lambda.iter().zip(state.lambda.iter()))
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        std::mem::swap(&mut state.z, &mut z);
        std::mem::swap(&mut state.lambda, &mut lambda);
        state.iteration += 1;
        if let Some(tol) = tol {
            if delta < tol {
                converged = true;
                break;
            }
        }
    }
    let y = recover_primal(qp, &state.lambda)?;
    Ok(PdhgSolution {
        y,
        lambda: state.lambda.clone(),
        iterations: state.iteration,
        converged,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::kkt_residuals;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn conv() -> SolveMode {
        SolveMode::ToConvergence {
            tol: 1e-12,
            max_iter: 100_000,
        }
    }

    #[test]
    fn derive_without_constraints_collapses() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[1.0, 2.0]),
            DMatrix::zeros(3, 2),
            v(&[1.0, -2.0, 3.0]),
        )
        .unwrap();
        let d = pdhg_derive(&qp, 0.5).unwrap();
        assert_eq!(d.f, DMatrix::identity(3, 3));
        assert_eq!(d.mu, v(&[-1.0, 2.0, -3.0]));
    }

    #[test]
    fn derive_identity_constraints() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        let d = pdhg_derive(&qp, 0.5).unwrap();
        assert!((d.f - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert_eq!(d.mu, v(&[0.0, 0.0]));
        assert!(pdhg_derive(&qp, 0.0).is_err());
        assert!(pdhg_derive(&qp, -1.0).is_err());
    }

    #[test]
    fn step_keeps_origin_fixed() {
        let d = PdhgDerived {
            f: DMatrix::identity(2, 2) * 0.3,
            mu: v(&[0.0, 0.0]),
            alpha: 0.5,
        };
        let next = pdhg_step(&PdhgState::zeros(2), &d);
        assert_eq!(next.z, v(&[0.0, 0.0]));
        assert_eq!(next.lambda, v(&[0.0, 0.0]));
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn step_scalar_arithmetic() {
        // (1 - 2·½·½)·1 + ½(1 - 1)·1 - 0 = ½ ;  ½(1 + 1) + 0 = 1
        let d = PdhgDerived {
            f: DMatrix::from_element(1, 1, 0.5),
            mu: v(&[0.0]),
            alpha: 0.5,
        };
        let s = PdhgState {
            z: v(&[1.0]),
            lambda: v(&[1.0]),
            iteration: 0,
        };
        let (next, pre) = pdhg_step_traced(&s, &d);
        assert_eq!(pre, v(&[0.5]));
        assert_eq!(next.z, v(&[0.5]));
        assert_eq!(next.lambda, v(&[1.0]));
    }

    #[test]
    fn step_matches_literal_update() {
        let f = DMatrix::from_row_slice(3, 3, &[0.6, 0.1, 0.0, 0.1, 0.5, -0.1, 0.0, -0.1, 0.7]);
        let d = PdhgDerived {
            f: f.clone(),
            mu: v(&[0.3, -0.2, 0.1]),
            alpha: 0.7,
        };
        let s = PdhgState {
            z: v(&[0.4, 0.0, 1.2]),
            lambda: v(&[-0.5, 0.9, 0.2]),
            iteration: 3,
        };
        let next = pdhg_step(&s, &d);
        let i = DMatrix::identity(3, 3);
        let lit = (&i - &f * (2.0 * d.alpha)) * &s.z + (&i - &f * 2.0) * &s.lambda * d.alpha - &d.mu * (2.0 * d.alpha);
        let lit_z = lit.map(|x| x.max(0.0));
        let lit_l = &f * (&s.z + &s.lambda) + &d.mu;
        assert!((next.z - lit_z).amax() < 1e-14);
        assert!((next.lambda - lit_l).amax() < 1e-14);
    }

    #[test]
    fn unconstrained_optimum_already_feasible() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[-1.0, -1.0]),
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        let sol = pdhg_solve(&qp, 0.5, conv(), None).unwrap();
        assert!(sol.converged);
        assert!((sol.y - v(&[1.0, 1.0])).amax() < 1e-9);
    }

    #[test]
    fn active_constraint_projection() {
        let qp = QpProblem::new(DMatrix::identity(1, 1), v(&[1.0]), DMatrix::identity(1, 1), v(&[0.0])).unwrap();
        let sol = pdhg_solve(&qp, 0.5, conv(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.y[0].abs() < 1e-9);
        assert!((sol.lambda[0] - 1.0).abs() < 1e-9);
        let kkt = kkt_residuals(&qp, &sol.y, &sol.lambda).unwrap();
        assert!(kkt.max() < 1e-9);
    }

    #[test]
    fn fixed_mode_runs_exact_iteration_count() {
        let qp = QpProblem::new(DMatrix::identity(1, 1), v(&[1.0]), DMatrix::identity(1, 1), v(&[0.0])).unwrap();
        let sol = pdhg_solve(&qp, 0.5, SolveMode::Fixed(7), None).unwrap();
        assert_eq!(sol.iterations, 7);
        assert!(!sol.converged);
        let sol = pdhg_solve(&qp, 0.5, SolveMode::Fixed(0), None).unwrap();
        assert_eq!(sol.iterations, 0);
        // λ = 0 recovers the unconstrained minimizer
        assert_eq!(sol.y, v(&[-1.0]));
    }

    #[test]
    fn non_convergence_is_reported() {
        let qp = QpProblem::new(DMatrix::identity(1, 1), v(&[1.0]), DMatrix::identity(1, 1), v(&[0.0])).unwrap();
        let sol = pdhg_solve(
            &qp,
            0.5,
            SolveMode::ToConvergence {
                tol: 1e-300,
                max_iter: 5,
            },
            None,
        )
        .unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 5);
    }

    #[test]
    fn warm_start_from_solution_converges_immediately() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]),
            v(&[0.2, 0.1]),
        )
        .unwrap();
        let sol = pdhg_solve(&qp, 0.5, conv(), None).unwrap();
        let again = pdhg_solve(&qp, 0.5, conv(), Some(&sol.state)).unwrap();
        assert!(again.converged);
        assert!(again.iterations < 5);
        assert!((again.y - sol.y).amax() < 1e-10);
    }

    #[test]
    fn recover_primal_examples() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(recover_primal(&qp, &v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            -v(&[0.3, -0.7]),
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(recover_primal(&qp, &v(&[0.0, 0.0])).unwrap(), v(&[0.3, -0.7]));
        assert!(recover_primal(&qp, &v(&[0.0])).is_err());
    }
}
