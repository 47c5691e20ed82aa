//! One-step persistent-safety certification of a learned QP filter.
//!
//! The filter is safe on a polytope `{G x <= c}` when, for every state in the
//! set and every reference in a box, the converged filter output keeps the
//! nominal successor state in the set. [`assemble_qcqp`] states this as a
//! nonconvex QCQP over the KKT conditions of the filter QP,
//! [`sample_falsify`] searches for counterexamples, and [`shor_relaxation`]
//! exports a semidefinite relaxation for external solvers.

mod falsify;
mod qcqp;
mod sdpa;

pub use falsify::{
    box_corners, grid_falsify, grid_points, safe_set_params, sample_falsify, sample_points, vacuous_params,
    FalsificationResult, Falsifier, FalsifyConfig, InnerSolver, Verdict, Witness, MIN_ACCEPTANCE,
};
pub use qcqp::{
    assemble_qcqp, dense_form, direct_objective, CertificateProblem, ConstraintGroup, QcqpConstraint, Quadratic, Sense,
    VariableLayout,
};
pub use sdpa::{export_sdpa, parse_sdpa, shor_relaxation, write_sdpa, SdpEntry, SdpExport};

use nalgebra::DVector;
use rand::Rng;

use crate::error::Result;
use crate::filters::{solve_exact, FilterConfig, LqpParams, LqpPrepared};
use crate::model::SafeSet;

/// A feasible point of the certificate: a random state of the safe set, a
/// random reference in the box, the exact filter KKT pair and a random
/// simplex weight.
pub fn sample_feasible_tuple(
    problem: &CertificateProblem,
    safe_set: &SafeSet,
    params: &LqpParams,
    cfg: &FilterConfig,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let prep = LqpPrepared::new(params.clone(), cfg)?;
    let pts = sample_points(safe_set, &problem.u_hat_box, 1, rng.random())?;
    let (x0, u) = pts.last().cloned().expect("one sample requested");
    let (y, mu) = solve_exact(&prep.qp(&x0, &u)?)?;
    let mut v = DVector::from_fn(safe_set.m_g(), |_, _| rng.random::<f64>() + 1e-3);
    v /= v.sum();
    problem.layout.stack(&x0, &u, &v, &y, &mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_benchmark;
    use crate::qp::ridge_diag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_lift_satisfies_the_relaxation() {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap().scaled(0.5).unwrap();
        let params = LqpParams::from_model(&s.model, &s.spec, 4, &s.input_bounds)
            .unwrap()
            .padded_to(40)
            .unwrap();
        let cfg = FilterConfig::default();
        let prob = assemble_qcqp(&s.model, &safe, &params, &ridge_diag(1, 4, cfg.eps), &s.input_bounds).unwrap();
        let sdp = shor_relaxation(&prob);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = sample_feasible_tuple(&prob, &safe, &params, &cfg, &mut rng).unwrap();
            assert!(prob.max_infeasibility(&w) <= 1e-8);
            let (res, lifted) = sdp.check_rank_one(&w);
            assert!(res <= 1e-8, "residual {res}");
            assert!((lifted + prob.objective.eval(&w)).abs() <= 1e-8);
        }
    }
}
