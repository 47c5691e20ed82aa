use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::filters::LqpParams;
use crate::model::{Bound, LtiModel, SafeSet};

/// Sense of a scalar constraint `g(w) ⋈ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Eq,
    /// `g(w) >= 0`.
    Ge,
}

/// Which group of the certificate a constraint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintGroup {
    SafeSet,
    InputBox,
    SimplexNonneg,
    SimplexSum,
    Stationarity,
    PrimalFeasibility,
    DualFeasibility,
    ComplementarityRow,
    ComplementarityAggregate,
}

/// A polynomial of degree at most two in the stacked variable `w`:
/// `constant + Σ linear_i w_i + Σ quad_(i,j) w_i w_j`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Quadratic {
    pub constant: f64,
    pub linear: Vec<(usize, f64)>,
    /// Pairs with `i <= j`.
    pub quad: Vec<(usize, usize, f64)>,
}

impl Quadratic {
    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        let mut v = self.constant;
        for &(i, a) in &self.linear {
            v += a * w[i];
        }
        for &(i, j, a) in &self.quad {
            v += a * w[i] * w[j];
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.linear.is_empty() && self.quad.is_empty()
    }

    fn push_lin(&mut self, i: usize, a: f64) {
        if a != 0.0 {
            self.linear.push((i, a));
        }
    }

    fn push_quad(&mut self, i: usize, j: usize, a: f64) {
        if a != 0.0 {
            self.quad.push((i.min(j), i.max(j), a));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpConstraint {
    pub group: ConstraintGroup,
    pub sense: Sense,
    pub expr: Quadratic,
}

/// Offsets of each variable block inside the stacked vector
/// `w = (x0, û, v, y, μ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub n_sys: usize,
    pub m_sys: usize,
    pub m_g: usize,
    pub n_qp: usize,
    pub m_qp: usize,
}

impl VariableLayout {
    pub fn x0(&self) -> usize {
        0
    }
    pub fn u_hat(&self) -> usize {
        self.n_sys
    }
    pub fn v(&self) -> usize {
        self.u_hat() + self.m_sys
    }
    pub fn y(&self) -> usize {
        self.v() + self.m_g
    }
    pub fn mu(&self) -> usize {
        self.y() + self.n_qp
    }
    pub fn len(&self) -> usize {
        self.mu() + self.m_qp
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stack(
        &self,
        x0: &DVector<f64>,
        u_hat: &DVector<f64>,
        v: &DVector<f64>,
        y: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("x0", self.n_sys, x0.len())?;
        check_dim("u_hat", self.m_sys, u_hat.len())?;
        check_dim("v", self.m_g, v.len())?;
        check_dim("y", self.n_qp, y.len())?;
        check_dim("mu", self.m_qp, mu.len())?;
        Ok(crate::linalg::vcat(&[x0, u_hat, v, y, mu]))
    }
}

/// The one-step persistent-safety certificate as a nonconvex QCQP: its
/// minimum is nonnegative iff every KKT point of the filter QP maps every
/// state of the safe set back into the safe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateProblem {
    pub layout: VariableLayout,
    /// Minimized.
    pub objective: Quadratic,
    pub constraints: Vec<QcqpConstraint>,
    pub u_hat_box: Vec<Bound>,
}

impl CertificateProblem {
    pub fn num_variables(&self) -> usize {
        self.layout.len()
    }

    /// Largest violation of any constraint at `w` (zero when feasible).
    pub fn max_infeasibility(&self, w: &DVector<f64>) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let g = c.expr.eval(w);
                match c.sense {
                    Sense::Eq => g.abs(),
                    Sense::Ge => (-g).max(0.0),
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Builds the certificate for filter `params` with QP weight `p_diag`
/// (the diagonal of `P`), safe set `{G x <= c}` and reference box.
///
/// Constraints, in order: `c − G x0 >= 0`; box bounds on `û`; `v >= 0`;
/// `1ᵀv = 1`; `P y − E₁ᵀû − Hᵀμ = 0`; `H y + W_b x0 + b_b >= 0`; `μ >= 0`;
/// per-row `μ_i (H y + W_b x0 + b_b)_i = 0`; and the aggregate
/// `μᵀ(H y + W_b x0 + b_b) = 0`. The objective is
/// `−vᵀ(G(A x0 + B y_{1:m}) − c)`.
pub fn assemble_qcqp(
    model: &LtiModel,
    safe_set: &SafeSet,
    params: &LqpParams,
    p_diag: &DVector<f64>,
    u_hat_box: &[Bound],
) -> Result<CertificateProblem> {
    let (n, m) = (model.n_sys(), model.m_sys());
    check_dim("safe set dimension", n, safe_set.n_sys())?;
    check_dim("params state dimension", n, params.n_sys())?;
    check_dim("params input dimension", m, params.m_sys())?;
    check_dim("P diagonal", params.n_qp(), p_diag.len())?;
    check_dim("reference box", m, u_hat_box.len())?;
    if params.n_qp() < m {
        return Err(Error::InvalidArgument(format!(
            "n_qp = {} is smaller than the input dimension {m}",
            params.n_qp()
        )));
    }
    let layout = VariableLayout {
        n_sys: n,
        m_sys: m,
        m_g: safe_set.m_g(),
        n_qp: params.n_qp(),
        m_qp: params.m_qp(),
    };
    let (g, c) = (safe_set.g(), safe_set.c());
    let (h, w_b, b_b) = (&params.h, &params.w_b, &params.b_b);
    let mut cons = Vec::new();
    let mut push = |group, sense, expr| cons.push(QcqpConstraint { group, sense, expr });

    for i in 0..layout.m_g {
        let mut e = Quadratic {
            constant: c[i],
            ..Default::default()
        };
        for j in 0..n {
            e.push_lin(layout.x0() + j, -g[(i, j)]);
        }
        push(ConstraintGroup::SafeSet, Sense::Ge, e);
    }
    for (j, b) in u_hat_box.iter().enumerate() {
        let idx = layout.u_hat() + j;
        push(
            ConstraintGroup::InputBox,
            Sense::Ge,
            Quadratic {
                constant: -b.lo,
                linear: vec![(idx, 1.0)],
                quad: vec![],
            },
        );
        push(
            ConstraintGroup::InputBox,
            Sense::Ge,
            Quadratic {
                constant: b.hi,
                linear: vec![(idx, -1.0)],
                quad: vec![],
            },
        );
    }
    for i in 0..layout.m_g {
        push(
            ConstraintGroup::SimplexNonneg,
            Sense::Ge,
            Quadratic {
                linear: vec![(layout.v() + i, 1.0)],
                ..Default::default()
            },
        );
    }
    push(
        ConstraintGroup::SimplexSum,
        Sense::Eq,
        Quadratic {
            constant: -1.0,
            linear: (0..layout.m_g).map(|i| (layout.v() + i, 1.0)).collect(),
            quad: vec![],
        },
    );
    for k in 0..layout.n_qp {
        let mut e = Quadratic::default();
        e.push_lin(layout.y() + k, p_diag[k]);
        if k < m {
            e.push_lin(layout.u_hat() + k, -1.0);
        }
        for i in 0..layout.m_qp {
            e.push_lin(layout.mu() + i, -h[(i, k)]);
        }
        push(ConstraintGroup::Stationarity, Sense::Eq, e);
    }
    // slack_i(w) = H_i y + W_i x0 + b_i
    let slack_row = |i: usize| {
        let mut e = Quadratic {
            constant: b_b[i],
            ..Default::default()
        };
        for k in 0..layout.n_qp {
            e.push_lin(layout.y() + k, h[(i, k)]);
        }
        for j in 0..n {
            e.push_lin(layout.x0() + j, w_b[(i, j)]);
        }
        e
    };
    for i in 0..layout.m_qp {
        push(ConstraintGroup::PrimalFeasibility, Sense::Ge, slack_row(i));
    }
    for i in 0..layout.m_qp {
        push(
            ConstraintGroup::DualFeasibility,
            Sense::Ge,
            Quadratic {
                linear: vec![(layout.mu() + i, 1.0)],
                ..Default::default()
            },
        );
    }
    let times_mu = |i: usize, s: &Quadratic, out: &mut Quadratic| {
        let mi = layout.mu() + i;
        out.push_lin(mi, s.constant);
        for &(j, a) in &s.linear {
            out.push_quad(mi, j, a);
        }
    };
    let mut aggregate = Quadratic::default();
    for i in 0..layout.m_qp {
        let s = slack_row(i);
        let mut e = Quadratic::default();
        times_mu(i, &s, &mut e);
        times_mu(i, &s, &mut aggregate);
        push(ConstraintGroup::ComplementarityRow, Sense::Eq, e);
    }
    push(ConstraintGroup::ComplementarityAggregate, Sense::Eq, aggregate);

    // −vᵀ(G A x0 + G B y_{1:m} − c)
    let ga = g * model.a();
    let gb = g * model.b();
    let mut objective = Quadratic::default();
    for i in 0..layout.m_g {
        let vi = layout.v() + i;
        objective.push_lin(vi, c[i]);
        for j in 0..n {
            objective.push_quad(vi, layout.x0() + j, -ga[(i, j)]);
        }
        for k in 0..m {
            objective.push_quad(vi, layout.y() + k, -gb[(i, k)]);
        }
    }
    Ok(CertificateProblem {
        layout,
        objective,
        constraints: cons,
        u_hat_box: u_hat_box.to_vec(),
    })
}

/// `−vᵀ(G x1 − c)` evaluated from raw matrices.
pub fn direct_objective(safe_set: &SafeSet, x1: &DVector<f64>, v: &DVector<f64>) -> f64 {
    -v.dot(&(safe_set.g() * x1 - safe_set.c()))
}

/// Dense `(A_k, a_k, c_k)` view of a quadratic: `wᵀ A w + aᵀ w + c` with
/// symmetric `A`.
pub fn dense_form(q: &Quadratic, n: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let mut a = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    for &(i, v) in &q.linear {
        lin[i] += v;
    }
    for &(i, j, v) in &q.quad {
        if i == j {
            a[(i, i)] += v;
        } else {
            a[(i, j)] += 0.5 * v;
            a[(j, i)] += 0.5 * v;
        }
    }
    (a, lin, q.constant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_benchmark;
    use crate::qp::ridge_diag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vacuous(n: usize, m: usize, n_qp: usize, m_qp: usize) -> LqpParams {
        LqpParams::new(
            DMatrix::zeros(m_qp, n_qp),
            DMatrix::zeros(m_qp, n),
            DVector::from_element(m_qp, 1.0),
            DVector::zeros(m),
        )
        .unwrap()
    }

    #[test]
    fn variable_count_for_the_double_integrator() {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap();
        let params = vacuous(2, 1, 4, 30);
        let prob = assemble_qcqp(&s.model, &safe, &params, &ridge_diag(1, 4, 1e-3), &s.input_bounds).unwrap();
        assert_eq!(prob.num_variables(), 41);
        for c in &prob.constraints {
            assert!(c.expr.quad.iter().all(|(i, j, _)| i <= j && *j < 41));
        }
    }

    #[test]
    fn zero_input_matrix_gives_nonnegative_objective() {
        let model = LtiModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let safe = SafeSet::from_box(&[Bound::new(-1.0, 1.0); 2]).unwrap();
        let params = vacuous(2, 1, 1, 3);
        let p = DVector::from_element(1, 1.0);
        let prob = assemble_qcqp(&model, &safe, &params, &p, &[Bound::new(-1.0, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let x0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let mut v = DVector::from_fn(4, |_, _| rng.random::<f64>());
            v /= v.sum();
            let u = DVector::from_element(1, rng.random_range(-1.0..1.0));
            // passthrough: y = û, μ = 0
            let w = prob.layout.stack(&x0, &u, &v, &u, &DVector::zeros(3)).unwrap();
            assert!(prob.max_infeasibility(&w) < 1e-12);
            assert!(prob.objective.eval(&w) >= 0.0);
        }
    }

    #[test]
    fn oracle_kkt_pairs_satisfy_the_kkt_constraints() {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap().scaled(0.5).unwrap();
        let params = LqpParams::from_model(&s.model, &s.spec, 2, &s.input_bounds).unwrap();
        let p = ridge_diag(1, 2, 1e-3);
        let prob = assemble_qcqp(&s.model, &safe, &params, &p, &s.input_bounds).unwrap();
        let prep = crate::filters::LqpPrepared::new(params, &Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x0 = DVector::from_fn(2, |_, _| rng.random_range(-0.25..0.25));
            let u = DVector::from_element(1, rng.random_range(-0.5..0.5));
            let qp = prep.qp(&x0, &u).unwrap();
            let (sol_y, sol_mu) = crate::filters::solve_exact(&qp).unwrap();
            let v = DVector::from_element(4, 0.25);
            let w = prob.layout.stack(&x0, &u, &v, &sol_y, &sol_mu).unwrap();
            for c in &prob.constraints {
                if matches!(
                    c.group,
                    ConstraintGroup::Stationarity
                        | ConstraintGroup::PrimalFeasibility
                        | ConstraintGroup::DualFeasibility
                        | ConstraintGroup::ComplementarityRow
                        | ConstraintGroup::ComplementarityAggregate
                ) {
                    let g = c.expr.eval(&w);
                    let bad = match c.sense {
                        Sense::Eq => g.abs(),
                        Sense::Ge => (-g).max(0.0),
                    };
                    assert!(bad <= 1e-8, "{:?} residual {bad}", c.group);
                }
            }
            let x1 = s.model.step(&x0, &sol_y.rows(0, 1).into_owned());
            let direct = direct_objective(&safe, &x1, &v);
            assert!((prob.objective.eval(&w) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_form_matches_evaluation() {
        let q = Quadratic {
            constant: 0.5,
            linear: vec![(0, 2.0), (2, -1.0)],
            quad: vec![(0, 1, 3.0), (2, 2, -0.5)],
        };
        let w = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let (a, l, c) = dense_form(&q, 3);
        let dense = (w.transpose() * &a * &w)[0] + l.dot(&w) + c;
        assert!((dense - q.eval(&w)).abs() < 1e-14);
    }
}
