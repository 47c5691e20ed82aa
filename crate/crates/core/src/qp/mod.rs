//! Standard-form QPs `min ½ yᵀPy + qᵀy  s.t.  Hy + b >= 0`, the predictive
//! safety filter construction, and KKT residuals.

mod oracle;
mod pdhg;

pub use oracle::{solve_qp_oracle, OracleSolution};
pub(crate) use pdhg::{derive_f, iterate_into};
pub use pdhg::{
    pdhg_derive, pdhg_solve, pdhg_solve_derived, pdhg_step, pdhg_step_traced, recover_primal, PdhgDerived,
    PdhgSolution, PdhgState, SolveMode,
};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::{LtiModel, SafetySpec};

/// Default ridge on the tail blocks of `P`.
pub const DEFAULT_EPS: f64 = 1e-3;
/// Default PDHG step size.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QpDoc", into = "QpDoc")]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    h: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct QpDoc {
    #[serde(rename = "P", with = "linalg::rows")]
    p: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    q: DVector<f64>,
    #[serde(rename = "H", with = "linalg::rows")]
    h: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    b: DVector<f64>,
}

impl TryFrom<QpDoc> for QpProblem {
    type Error = Error;
    fn try_from(d: QpDoc) -> Result<Self> {
        QpProblem::new(d.p, d.q, d.h, d.b)
    }
}

impl From<QpProblem> for QpDoc {
    fn from(p: QpProblem) -> Self {
        Self {
            p: p.p,
            q: p.q,
            h: p.h,
            b: p.b,
        }
    }
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = q.len();
        check_dim("P rows", n, p.nrows())?;
        check_dim("P columns", n, p.ncols())?;
        check_dim("H columns", n, h.ncols())?;
        check_dim("b length", h.nrows(), b.len())?;
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * (1.0 + p.amax()) {
            return Err(Error::NotPositiveDefinite("P"));
        }
        if Cholesky::new(p.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("P"));
        }
        if ![&p, &h].iter().all(|m| linalg::all_finite(m)) || !q.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("QpProblem".into()));
        }
        Ok(Self { p, q, h, b })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn n_qp(&self) -> usize {
        self.q.len()
    }
    pub fn m_qp(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.p * y)) + self.q.dot(y)
    }

    /// `Hy + b`.
    pub fn slack(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.h * y + &self.b
    }

    /// Same data with `(P, q)` scaled by `s`.
    pub fn scaled_objective(&self, s: f64) -> Result<Self> {
        Self::new(&self.p * s, &self.q * s, self.h.clone(), self.b.clone())
    }

    pub(crate) fn p_cholesky(&self) -> Cholesky<f64, Dyn> {
        // validated at construction
        Cholesky::new(self.p.clone()).expect("P is positive definite")
    }
}

/// Block-diagonal `P = diag(I_m, eps I_{(N-1)m})`.
pub fn ridge_p(m_sys: usize, horizon: usize, eps: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&ridge_diag(m_sys, m_sys * horizon, eps))
}

/// Diagonal of `P`: ones on the first `m_sys` entries, `eps` elsewhere.
pub fn ridge_diag(m_sys: usize, n_qp: usize, eps: f64) -> DVector<f64> {
    DVector::from_fn(n_qp, |i, _| if i < m_sys { 1.0 } else { eps })
}

/// `q = -E_1ᵀ u_ref`.
pub fn selector_q(u_ref: &DVector<f64>, n_qp: usize) -> DVector<f64> {
    let mut q = DVector::zeros(n_qp);
    q.rows_mut(0, u_ref.len()).copy_from(&(-u_ref));
    q
}

/// Stacked predictions `x_{1..N} = 𝒜 x0 + ℬ y`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub a_stack: DMatrix<f64>,
    pub b_stack: DMatrix<f64>,
}

impl Prediction {
    pub fn new(model: &LtiModel, horizon: usize) -> Self {
        let (n, m) = (model.n_sys(), model.m_sys());
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(DMatrix::<f64>::identity(n, n));
        for k in 1..=horizon {
            powers.push(model.a() * &powers[k - 1]);
        }
        let mut a_stack = DMatrix::zeros(n * horizon, n);
        let mut b_stack = DMatrix::zeros(n * horizon, m * horizon);
        for i in 0..horizon {
            a_stack.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
            for j in 0..=i {
                b_stack
                    .view_mut((i * n, j * m), (n, m))
                    .copy_from(&(&powers[i - j] * model.b()));
            }
        }
        Self { a_stack, b_stack }
    }

    /// Last `n_sys` rows of `𝒜` and `ℬ`.
    pub fn terminal(&self, n_sys: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let r = self.a_stack.nrows() - n_sys;
        (
            self.a_stack.rows(r, n_sys).into_owned(),
            self.b_stack.rows(r, n_sys).into_owned(),
        )
    }
}

/// The state-affine constraint data `Hy + W x0 + b0 >= 0` of the predictive
/// safety filter, independent of `x0` and `u_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfConstraints {
    pub h: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub b0: DVector<f64>,
}

impl PsfConstraints {
    pub fn build(model: &LtiModel, spec: &SafetySpec, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        check_dim("spec state dimension", model.n_sys(), spec.n_sys())?;
        check_dim("spec input dimension", model.m_sys(), spec.m_sys())?;
        let (n, m) = (model.n_sys(), model.m_sys());
        let (mx, mu, mf) = (spec.m_x(), spec.m_u(), spec.m_f());
        let pred = Prediction::new(model, horizon);
        let (a_n, b_n) = pred.terminal(n);
        let rows = horizon * (mx + mu) + mf;
        let cols = horizon * m;
        let mut h = DMatrix::zeros(rows, cols);
        let mut w = DMatrix::zeros(rows, n);
        let mut b0 = DVector::zeros(rows);
        for k in 0..horizon {
            let r = k * mx;
            let bk = pred.b_stack.rows(k * n, n);
            let ak = pred.a_stack.rows(k * n, n);
            h.view_mut((r, 0), (mx, cols)).copy_from(&(spec.s_x() * bk));
            w.view_mut((r, 0), (mx, n)).copy_from(&(spec.s_x() * ak));
            b0.rows_mut(r, mx).copy_from(&(-spec.d_x()));
        }
        let base = horizon * mx;
        for k in 0..horizon {
            let r = base + k * mu;
            h.view_mut((r, k * m), (mu, m)).copy_from(spec.s_u());
            b0.rows_mut(r, mu).copy_from(&(-spec.d_u()));
        }
        let r = base + horizon * mu;
        h.view_mut((r, 0), (mf, cols)).copy_from(&(spec.f_term() * b_n));
        w.view_mut((r, 0), (mf, n)).copy_from(&(spec.f_term() * a_n));
        b0.rows_mut(r, mf).copy_from(&(-spec.g_term()));
        Ok(Self { h, w, b0 })
    }

    pub fn b(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.w * x0 + &self.b0
    }
}

/// Predictive-safety-filter QP for state `x0` and reference input `u_ref`.
pub fn build_psf_qp(
    model: &LtiModel,
    spec: &SafetySpec,
    x0: &DVector<f64>,
    u_ref: &DVector<f64>,
    horizon: usize,
    eps: f64,
) -> Result<QpProblem> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("ridge eps must be positive".into()));
    }
    check_dim("x0", model.n_sys(), x0.len())?;
    check_dim("u_ref", model.m_sys(), u_ref.len())?;
    let cons = PsfConstraints::build(model, spec, horizon)?;
    let n_qp = horizon * model.m_sys();
    QpProblem::new(
        ridge_p(model.m_sys(), horizon, eps),
        selector_q(u_ref, n_qp),
        cons.h.clone(),
        cons.b(x0),
    )
}

/// KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QpProblem, y: &DVector<f64>, mu: &DVector<f64>) -> Result<KktResidual> {
    check_dim("y", qp.n_qp(), y.len())?;
    check_dim("mu", qp.m_qp(), mu.len())?;
    let stat = qp.p() * y + qp.q() - qp.h().transpose() * mu;
    let slack = qp.slack(y);
    Ok(KktResidual {
        stationarity: linalg::inf_norm(&stat),
        primal: slack.iter().fold(0.0_f64, |m, s| m.max(-s)),
        dual: mu.iter().fold(0.0_f64, |m, s| m.max(-s)),
        complementarity: mu.dot(&slack).abs(),
    })
}
