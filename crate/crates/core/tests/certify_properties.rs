use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lqpsf::certify::{
    assemble_qcqp, direct_objective, parse_sdpa, sample_feasible_tuple, sample_points, shor_relaxation, write_sdpa,
    Falsifier, FalsifyConfig,
};
use lqpsf::envs::env_step;
use lqpsf::filters::{solve_exact, FilterConfig, LqpFilter, LqpMode, LqpPrepared, SafetyFilter};
use lqpsf::model::load_benchmark;
use lqpsf::qp::ridge_diag;
use lqpsf::LqpParams;

fn init_params(seed: u64, m_qp: usize) -> LqpParams {
    let s = load_benchmark("double_integrator").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LqpParams::init_random(2, &s.input_bounds, 2, m_qp, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The reported worst violation is the exact maximum over the evaluated
    /// points, and the witness replays through the deployed filter.
    #[test]
    fn worst_violation_is_the_sample_maximum(seed in any::<u64>()) {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap().scaled(0.8).unwrap();
        let params = init_params(seed, 5);
        let cfg = FalsifyConfig { n_samples: 40, seed, ..FalsifyConfig::default() };
        let points = sample_points(&safe, &s.input_bounds, cfg.n_samples, cfg.seed).unwrap();
        let result = Falsifier::new(&s.model, &safe, &params, cfg).unwrap().evaluate(&points).unwrap();

        let prep = LqpPrepared::new(params.clone(), &cfg.filter).unwrap();
        let manual = points
            .iter()
            .map(|(x0, u)| {
                let (y, _) = solve_exact(&prep.qp(x0, u).unwrap()).unwrap();
                safe.max_violation(&s.model.step(x0, &y.rows(0, 1).into_owned()))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((result.worst_violation - manual).abs() <= 1e-9);
        prop_assert_eq!(result.samples_evaluated, points.len());

        if let Some(w) = result.witness.filter(|_| result.worst_violation > cfg.violation_tol) {
            let filter = LqpFilter::new(
                params,
                &cfg.filter,
                LqpMode::Converged { tol: 1e-12, max_iter: 5_000_000 },
            )
            .unwrap();
            let x0 = DVector::from_vec(w.x0.clone());
            let u0 = filter.apply(&x0, &DVector::from_vec(w.u_hat.clone())).unwrap();
            let x1 = env_step(&s, &x0, &u0).unwrap();
            prop_assert!((safe.max_violation(&x1) - result.worst_violation).abs() <= 1e-6);
        }
    }

    #[test]
    fn objective_and_lift_are_consistent(seed in any::<u64>(), m_qp in 2usize..8) {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap().scaled(0.5).unwrap();
        let params = init_params(seed, m_qp);
        let cfg = FilterConfig::default();
        let prob = assemble_qcqp(&s.model, &safe, &params, &ridge_diag(1, 2, cfg.eps), &s.input_bounds).unwrap();
        let sdp = shor_relaxation(&prob);
        prop_assert_eq!(sdp.moment_dim, 1 + 2 + 1 + safe.m_g() + 2 + m_qp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let w = sample_feasible_tuple(&prob, &safe, &params, &cfg, &mut rng).unwrap();
        prop_assert!(prob.max_infeasibility(&w) <= 1e-8);

        let l = prob.layout;
        let x0 = w.rows(l.x0(), 2).into_owned();
        let y0 = w.rows(l.y(), 1).into_owned();
        let v = w.rows(l.v(), safe.m_g()).into_owned();
        let direct = direct_objective(&safe, &s.model.step(&x0, &y0), &v);
        prop_assert!((prob.objective.eval(&w) - direct).abs() <= 1e-10);

        let (res, lifted) = sdp.check_rank_one(&w);
        prop_assert!(res <= 1e-8);
        prop_assert!((lifted + prob.objective.eval(&w)).abs() <= 1e-8);

        let text = write_sdpa(&sdp);
        let back = parse_sdpa(&text).unwrap();
        prop_assert_eq!(write_sdpa(&back), text);
        prop_assert_eq!(back, sdp);
    }
}
