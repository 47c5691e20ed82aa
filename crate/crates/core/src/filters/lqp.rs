//! The learnable QP filter: an unrolled PDHG network whose constraint data
//! `(H, W_b, b_b)` are trained, together with its exact reverse-mode pass.
//!
//! The filter solves `min ½ yᵀPy − ûᵀy₁  s.t.  Hy + W_b x0 + b_b >= 0` with the
//! fixed ridge `P = diag(I, eps I)` and returns the leading input block of `y`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::FilterConfig;
use crate::error::{check_dim, Error, Result};
use crate::model::{Bound, LtiModel, SafetySpec};
use crate::qp::{self, PsfConstraints, QpProblem};

/// Trainable parameters. `log_std` only shapes exploration during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LqpParams {
    pub h: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
    pub b_b: DVector<f64>,
    pub log_std: DVector<f64>,
}

pub const DEFAULT_N_QP: usize = 4;
pub const DEFAULT_M_QP: usize = 30;
const INIT_H_SCALE: f64 = 0.1;
/// Initial constraint offset. Small enough that random rows start near
/// their boundary and carry gradient signal from the first update.
pub const INIT_OFFSET: f64 = 0.1;

impl LqpParams {
    pub fn new(h: DMatrix<f64>, w_b: DMatrix<f64>, b_b: DVector<f64>, log_std: DVector<f64>) -> Result<Self> {
        let m_qp = h.nrows();
        check_dim("W_b rows", m_qp, w_b.nrows())?;
        check_dim("b_b length", m_qp, b_b.len())?;
        if log_std.len() > h.ncols() {
            return Err(Error::InvalidArgument(format!(
                "n_qp = {} is smaller than the input dimension {}",
                h.ncols(),
                log_std.len()
            )));
        }
        let p = Self { h, w_b, b_b, log_std };
        if !p.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("LqpParams".into()));
        }
        Ok(p)
    }

    /// Gaussian `H` of scale 0.1, `W_b = 0`, `b_b = INIT_OFFSET`, and an exploration
    /// std of a tenth of each input range.
    pub fn init_random(
        n_sys: usize,
        input_bounds: &[Bound],
        n_qp: usize,
        m_qp: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = DMatrix::from_fn(m_qp, n_qp, |_, _| INIT_H_SCALE * rng.sample::<f64, _>(StandardNormal));
        Self::new(
            h,
            DMatrix::zeros(m_qp, n_sys),
            DVector::from_element(m_qp, INIT_OFFSET),
            default_log_std(input_bounds),
        )
    }

    /// Constraint data of the nominal predictive filter for `model`, with
    /// `n_qp = m_sys · horizon`.
    pub fn from_model(model: &LtiModel, spec: &SafetySpec, horizon: usize, input_bounds: &[Bound]) -> Result<Self> {
        let cons = PsfConstraints::build(model, spec, horizon)?;
        Self::new(cons.h, cons.w, cons.b0, default_log_std(input_bounds))
    }

    /// Appends always-satisfied rows (`0·y + 0·x0 + 1 >= 0`) up to `m_qp` rows.
    pub fn padded_to(&self, m_qp: usize) -> Result<Self> {
        let rows = self.m_qp();
        if m_qp < rows {
            return Err(Error::InvalidArgument(format!(
                "cannot pad {rows} constraint rows down to {m_qp}"
            )));
        }
        let h = self.h.clone().resize_vertically(m_qp, 0.0);
        let w_b = self.w_b.clone().resize_vertically(m_qp, 0.0);
        let mut b_b = self.b_b.clone().resize_vertically(m_qp, 0.0);
        b_b.rows_mut(rows, m_qp - rows).fill(1.0);
        Self::new(h, w_b, b_b, self.log_std.clone())
    }

    pub fn n_qp(&self) -> usize {
        self.h.ncols()
    }
    pub fn m_qp(&self) -> usize {
        self.h.nrows()
    }
    pub fn n_sys(&self) -> usize {
        self.w_b.ncols()
    }
    pub fn m_sys(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.h.len() + self.w_b.len() + self.b_b.len() + self.log_std.len()
    }

    /// Column-major `H`, `W_b`, then `b_b` and `log_std`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.h.as_slice());
        v.extend_from_slice(self.w_b.as_slice());
        v.extend_from_slice(self.b_b.as_slice());
        v.extend_from_slice(self.log_std.as_slice());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut rest = flat;
        for dst in [
            self.h.as_mut_slice(),
            self.w_b.as_mut_slice(),
            self.b_b.as_mut_slice(),
            self.log_std.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }
}

pub fn default_log_std(input_bounds: &[Bound]) -> DVector<f64> {
    DVector::from_iterator(
        input_bounds.len(),
        input_bounds.iter().map(|b| (0.1 * (b.hi - b.lo)).ln()),
    )
}

/// Parameter-only quantities shared by every forward pass of one snapshot.
#[derive(Debug, Clone)]
pub struct LqpPrepared {
    params: LqpParams,
    p_inv: DVector<f64>,
    f: DMatrix<f64>,
    alpha: f64,
    eps: f64,
    n_iter: usize,
}

impl LqpPrepared {
    pub fn new(params: LqpParams, cfg: &FilterConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let p_diag = qp::ridge_diag(params.m_sys(), params.n_qp(), cfg.eps);
        let p_inv = p_diag.map(|d| 1.0 / d);
        let mut p_inv_ht = params.h.transpose();
        for (i, mut row) in p_inv_ht.row_iter_mut().enumerate() {
            row *= p_inv[i];
        }
        let f = qp::derive_f(&params.h, &p_inv_ht)?;
        Ok(Arc::new(Self {
            params,
            p_inv,
            f,
            alpha: cfg.alpha,
            eps: cfg.eps,
            n_iter: cfg.n_iter,
        }))
    }

    pub fn params(&self) -> &LqpParams {
        &self.params
    }
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
    pub fn n_iter(&self) -> usize {
        self.n_iter
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `c = H P⁻¹ q − b` with `q = −E₁ᵀû`, `b = W_b x0 + b_b`.
    fn offset(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> DVector<f64> {
        let m = self.params.m_sys();
        let mut c = -&self.params.b_b;
        c.gemv(-1.0, &self.params.w_b, x0, 1.0);
        c.gemv(-1.0, &self.params.h.columns(0, m), u_ref, 1.0);
        c
    }

    /// `y = P⁻¹(Hᵀλ − q)`.
    fn recover(&self, lambda: &DVector<f64>, u_ref: &DVector<f64>) -> DVector<f64> {
        let mut y = self.params.h.tr_mul(lambda);
        let mut top = y.rows_mut(0, u_ref.len());
        top += u_ref;
        y.component_mul_assign(&self.p_inv);
        y
    }

    fn check_inputs(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<()> {
        check_dim("x0", self.params.n_sys(), x0.len())?;
        check_dim("u_ref", self.params.m_sys(), u_ref.len())
    }

    /// The QP this snapshot represents at `(x0, û)`.
    pub fn qp(&self, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<QpProblem> {
        self.check_inputs(x0, u_ref)?;
        let p = DMatrix::from_diagonal(&self.p_inv.map(|d| 1.0 / d));
        QpProblem::new(
            p,
            qp::selector_q(u_ref, self.params.n_qp()),
            self.params.h.clone(),
            &self.params.w_b * x0 + &self.params.b_b,
        )
    }

    /// Unrolled forward pass of exactly `n_iter` iterations, recorded on a tape.
    pub fn forward(self: &Arc<Self>, x0: &DVector<f64>, u_ref: &DVector<f64>) -> Result<UnrollTape> {
        self.check_inputs(x0, u_ref)?;
        let m = self.params.m_qp();
        let c = self.offset(x0, u_ref);
        let mu = &self.f * &c;
        let mut z = Vec::with_capacity(self.n_iter + 1);
        let mut lambda = Vec::with_capacity(self.n_iter + 1);
        let mut s = Vec::with_capacity(self.n_iter);
        z.push(DVector::zeros(m));
        lambda.push(DVector::zeros(m));
        for k in 0..self.n_iter {
            let mut zn = DVector::zeros(m);
            let mut ln = DVector::zeros(m);
            let mut sk = DVector::zeros(m);
            qp::iterate_into(&self.f, &mu, self.alpha, &z[k], &lambda[k], &mut zn, &mut ln, &mut sk);
            z.push(zn);
            lambda.push(ln);
            s.push(sk);
        }
        let y = self.recover(&lambda[self.n_iter], u_ref);
        let u0 = y.rows(0, self.params.m_sys()).into_owned();
        Ok(UnrollTape {
            prepared: Arc::clone(self),
            x0: x0.clone(),
            u_ref: u_ref.clone(),
            c,
            z,
            lambda,
            s,
            y,
            u0,
        })
    }

    /// Runs the iteration until the `(z, λ)` update falls below `tol`.
    pub fn solve_converged(
        &self,
        x0: &DVector<f64>,
        u_ref: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<ConvergedOutput> {
        self.check_inputs(x0, u_ref)?;
        let qp = self.qp(x0, u_ref)?;
        let derived = qp::PdhgDerived {
            f: self.f.clone(),
            mu: &self.f * self.offset(x0, u_ref),
            alpha: self.alpha,
        };
        let sol = qp::pdhg_solve_derived(&qp, &derived, qp::SolveMode::ToConvergence { tol, max_iter }, None)?;
        let y = self.recover(&sol.lambda, u_ref);
        Ok(ConvergedOutput {
            u0: y.rows(0, self.params.m_sys()).into_owned(),
            y,
            lambda: sol.lambda,
            iterations: sol.iterations,
            converged: sol.converged,
            qp,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvergedOutput {
    pub u0: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub qp: QpProblem,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct UnrollTape {
    prepared: Arc<LqpPrepared>,
    pub x0: DVector<f64>,
    pub u_ref: DVector<f64>,
    c: DVector<f64>,
    pub z: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    /// Pre-projection signals, one per iteration.
    pub s: Vec<DVector<f64>>,
    pub y: DVector<f64>,
    pub u0: DVector<f64>,
}

impl UnrollTape {
    pub fn len(&self) -> usize {
        self.s.len()
    }
    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
    pub fn prepared(&self) -> &Arc<LqpPrepared> {
        &self.prepared
    }

    /// Re-runs the forward pass from the recorded inputs.
    pub fn replay(&self) -> Result<UnrollTape> {
        self.prepared.forward(&self.x0, &self.u_ref)
    }

    /// Smallest `|s|` over all recorded pre-projection entries.
    pub fn min_abs_signal(&self) -> f64 {
        self.s
            .iter()
            .flat_map(|s| s.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// One-shot forward pass: prepares the snapshot and unrolls it.
pub fn lqp_forward(
    params: &LqpParams,
    x0: &DVector<f64>,
    u_ref: &DVector<f64>,
    cfg: &FilterConfig,
) -> Result<(DVector<f64>, UnrollTape)> {
    let prep = LqpPrepared::new(params.clone(), cfg)?;
    let tape = prep.forward(x0, u_ref)?;
    Ok((tape.u0.clone(), tape))
}

/// Gradients of a scalar loss with respect to the constraint parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LqpGradients {
    pub h: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
    pub b_b: DVector<f64>,
}

impl LqpGradients {
    pub fn zeros(p: &LqpParams) -> Self {
        Self {
            h: DMatrix::zeros(p.m_qp(), p.n_qp()),
            w_b: DMatrix::zeros(p.m_qp(), p.n_sys()),
            b_b: DVector::zeros(p.m_qp()),
        }
    }
}

pub fn lqp_backward(tape: &UnrollTape, grad_u0: &DVector<f64>) -> Result<LqpGradients> {
    lqp_backward_batch(std::iter::once((tape, grad_u0)))
}

/// Sum of the reverse passes of many tapes from one snapshot. The adjoint of
/// `F` is accumulated across the batch so the factorization differential is
/// applied once.
pub fn lqp_backward_batch<'a>(
    items: impl IntoIterator<Item = (&'a UnrollTape, &'a DVector<f64>)>,
) -> Result<LqpGradients> {
    let mut iter = items.into_iter().peekable();
    let Some((first, _)) = iter.peek() else {
        return Err(Error::InvalidArgument("empty backward batch".into()));
    };
    let prep = Arc::clone(&first.prepared);
    let params = &prep.params;
    let (m, n, m_sys) = (params.m_qp(), params.n_qp(), params.m_sys());
    let alpha = prep.alpha;
    let mut grads = LqpGradients::zeros(params);
    let mut f_bar = DMatrix::zeros(m, m);

    let mut lam_bar = DVector::zeros(m);
    let mut z_bar = DVector::zeros(m);
    let mut s_bar = DVector::zeros(m);
    let mut r = DVector::zeros(m);
    let mut a = DVector::zeros(m);
    let mut fr = DVector::zeros(m);
    let mut mu_bar = DVector::zeros(m);
    let mut w = DVector::zeros(n);

    for (tape, g) in iter {
        if !Arc::ptr_eq(&tape.prepared, &prep) {
            return Err(Error::InvalidArgument(
                "tapes in one backward batch must share a parameter snapshot".into(),
            ));
        }
        check_dim("grad_u0", m_sys, g.len())?;
        let k_max = tape.len();

        // y = P⁻¹(Hᵀλ − q)
        w.fill(0.0);
        for i in 0..m_sys {
            w[i] = g[i] * prep.p_inv[i];
        }
        lam_bar.gemv(1.0, &params.h, &w, 0.0);
        grads.h.ger(1.0, &tape.lambda[k_max], &w, 1.0);
        z_bar.fill(0.0);
        mu_bar.fill(0.0);

        for k in (0..k_max).rev() {
            let sk = &tape.s[k];
            for i in 0..m {
                s_bar[i] = if sk[i] > 0.0 { z_bar[i] } else { 0.0 };
                r[i] = lam_bar[i] - 2.0 * alpha * s_bar[i];
                a[i] = tape.z[k][i] + tape.lambda[k][i];
            }
            f_bar.ger(1.0, &r, &a, 1.0);
            mu_bar += &r;
            fr.gemv(1.0, &prep.f, &r, 0.0);
            for i in 0..m {
                z_bar[i] = s_bar[i] + fr[i];
                lam_bar[i] = alpha * s_bar[i] + fr[i];
            }
        }

        // μ = F c
        f_bar.ger(1.0, &mu_bar, &tape.c, 1.0);
        let c_bar = &prep.f * &mu_bar;
        // c = −H[:, :m_sys] û − W_b x0 − b_b
        grads.h.columns_mut(0, m_sys).ger(-1.0, &c_bar, &tape.u_ref, 1.0);
        grads.w_b.ger(-1.0, &c_bar, &tape.x0, 1.0);
        grads.b_b -= &c_bar;
    }

    // F = (I + H P⁻¹ Hᵀ)⁻¹  ⇒  dF = −F (dH P⁻¹Hᵀ + H P⁻¹dHᵀ) F
    let m_bar = -(&prep.f * &f_bar * &prep.f);
    let sym = &m_bar + m_bar.transpose();
    let mut h_p_inv = params.h.clone();
    for (j, mut col) in h_p_inv.column_iter_mut().enumerate() {
        col *= prep.p_inv[j];
    }
    grads.h += sym * h_p_inv;
    Ok(grads)
}
