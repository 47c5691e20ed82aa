//! Reference QP solver by exhaustive active-set enumeration.
//!
//! For a strictly convex QP the optimum admits a multiplier vector supported on
//! a linearly independent active set, so subsets of size at most `n_qp` are
//! enough. Each candidate solves the equality-constrained KKT system
//!
//! ```text
//! [ P   -H_Sᵀ ] [y  ]   [-q  ]
//! [ H_S   0   ] [μ_S] = [-b_S]
//! ```
//!
//! and is kept when primal and dual feasible.

use nalgebra::{DMatrix, DVector};

use super::QpProblem;
use crate::error::{Error, Result};
use crate::polytope::for_each_subset;

pub const ORACLE_MAX_CONSTRAINTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub y: DVector<f64>,
    pub mu: DVector<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
}

pub fn solve_qp_oracle(qp: &QpProblem) -> Result<OracleSolution> {
    let (n, m) = (qp.n_qp(), qp.m_qp());
    if m > ORACLE_MAX_CONSTRAINTS {
        return Err(Error::InvalidArgument(format!(
            "oracle enumerates active sets and supports at most {ORACLE_MAX_CONSTRAINTS} constraints, got {m}"
        )));
    }
    let scale = 1.0 + qp.h().amax() + qp.b().amax() + qp.q().amax() + qp.p().amax();
    let tol = 1e-9 * scale;
    let mut best: Option<OracleSolution> = None;
    for k in 0..=n.min(m) {
        for_each_subset(m, k, |active| {
            let Some((y, mu_s)) = solve_equality(qp, active) else {
                return;
            };
            if mu_s.iter().any(|v| *v < -tol) {
                return;
            }
            if qp.slack(&y).iter().any(|v| *v < -tol) {
                return;
            }
            let objective = qp.objective(&y);
            if best.as_ref().is_some_and(|b| b.objective <= objective) {
                return;
            }
            let mut mu = DVector::zeros(m);
            for (i, &r) in active.iter().enumerate() {
                mu[r] = mu_s[i].max(0.0);
            }
            best = Some(OracleSolution {
                y,
                mu,
                objective,
                active: active.to_vec(),
            });
        });
    }
    best.ok_or(Error::Infeasible)
}

fn solve_equality(qp: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.n_qp();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(qp.p());
    rhs.rows_mut(0, n).copy_from(&(-qp.q()));
    for (i, &r) in active.iter().enumerate() {
        for j in 0..n {
            let hij = qp.h()[(r, j)];
            kkt[(n + i, j)] = hij;
            kkt[(j, n + i)] = -hij;
        }
        rhs[n + i] = -qp.b()[r];
    }
    let lu = kkt.full_piv_lu();
    // reject rank-deficient active sets
    let diag_max = (0..n + k).map(|i| lu.u()[(i, i)].abs()).fold(0.0, f64::max);
    let diag_min = (0..n + k).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if n + k > 0 && !(diag_min > 1e-12 * diag_max) {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}
