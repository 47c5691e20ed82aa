//! Evaluation sweeps, FLOP accounting and table output.

mod eval;
mod flops;
mod table;

pub use eval::{episode_seed, evaluate, evaluate_with, run_episodes, summarize, EvalReport, DEFAULT_EPISODES};
pub use flops::{count_flops, pdhg_iteration_flops, FlopPhase, FlopsDescriptor, FlopsReport, PSF_NOMINAL_ITERATIONS};
pub use table::{emit_table, fmt_full, to_csv, to_text, CSV_HEADER};

use crate::model::BenchmarkSystem;

/// Noise levels swept per system; the nonlinear plant tolerates larger inputs.
pub fn default_noise_grid(system: &BenchmarkSystem) -> [f64; 4] {
    match system.name.as_str() {
        "quadruple_tank" => [0.0, 0.2, 1.0, 5.0],
        "cartpole" => [0.0, 1.0, 5.0, 8.0],
        _ => [0.0, 0.5, 1.0, 2.0],
    }
}
