//! Shared fixtures for the benchmarks.

use lqpsf::filters::{FilterConfig, LqpParams};
use lqpsf::model::load_benchmark;
use lqpsf::BenchmarkSystem;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn double_integrator() -> BenchmarkSystem {
    load_benchmark("double_integrator").expect("built-in system")
}

/// Randomly initialized learned filter at the default size.
pub fn default_params(system: &BenchmarkSystem) -> LqpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    LqpParams::init_random(
        system.n_sys(),
        &system.input_bounds,
        lqpsf::filters::DEFAULT_N_QP,
        lqpsf::filters::DEFAULT_M_QP,
        &mut rng,
    )
    .expect("default dimensions")
}

/// Model-derived parameters, padded to the default row count.
pub fn model_params(system: &BenchmarkSystem) -> LqpParams {
    let cfg = FilterConfig::default();
    LqpParams::from_model(&system.model, &system.spec, cfg.horizon, &system.input_bounds)
        .and_then(|p| p.padded_to(lqpsf::filters::DEFAULT_M_QP))
        .expect("double integrator fits the default size")
}

pub fn state(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
