use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{rollout, ReferenceController, RolloutOptions, Task, Trajectory};
use crate::error::Result;
use crate::filters::SafetyFilter;
use crate::model::BenchmarkSystem;

pub const DEFAULT_EPISODES: usize = 100;

/// Aggregate metrics of one (system, controller, filter) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub task: Task,
    pub controller: String,
    pub noise_level: f64,
    pub noise_mean: f64,
    pub noise_sigma: f64,
    pub filter: String,
    pub episodes: usize,
    pub total_steps: usize,
    pub violating_steps: usize,
    pub vio_pct: f64,
    /// Mean over episodes of `Σ_t ‖û_t − u_t‖²`.
    pub dev: f64,
    /// Sum over all episodes of the same quantity.
    pub dev_sum: f64,
    /// Steps at which the filter failed and `û` was applied.
    pub fail_count: usize,
    /// Episodes with at least one filter failure.
    pub failed_episodes: usize,
    pub base_seed: u64,
}

impl EvalReport {
    /// The configuration could not be run cleanly; rendered as "fail".
    pub fn failed(&self) -> bool {
        self.failed_episodes > 0
    }
}

/// Seed of episode `i`.
pub fn episode_seed(base_seed: u64, i: usize) -> u64 {
    base_seed.wrapping_add(i as u64)
}

/// Runs the episodes in parallel and returns them in index order.
pub fn run_episodes(
    system: &BenchmarkSystem,
    ctrl: &ReferenceController,
    filter: &dyn SafetyFilter,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    let opts = RolloutOptions {
        steps: system.episode_length,
        early_termination: false,
    };
    (0..episodes)
        .into_par_iter()
        .map(|i| rollout(system, ctrl, filter, opts, episode_seed(base_seed, i), None))
        .collect()
}

pub fn summarize(
    system: &BenchmarkSystem,
    task: Task,
    ctrl: &ReferenceController,
    noise_level: f64,
    filter_name: &str,
    trajectories: &[Trajectory],
    base_seed: u64,
) -> EvalReport {
    let total_steps: usize = trajectories.iter().map(Trajectory::steps).sum();
    let violating_steps: usize = trajectories.iter().map(Trajectory::violations).sum();
    let dev_sum: f64 = trajectories.iter().map(Trajectory::deviation).sum();
    let fail_count: usize = trajectories.iter().map(Trajectory::failures).sum();
    let failed_episodes = trajectories.iter().filter(|t| t.failures() > 0).count();
    let episodes = trajectories.len();
    let noise = ctrl.noise();
    EvalReport {
        system: system.name.clone(),
        task,
        controller: ctrl.kind().to_string(),
        noise_level,
        noise_mean: noise.mean,
        noise_sigma: noise.sigma,
        filter: filter_name.to_string(),
        episodes,
        total_steps,
        violating_steps,
        vio_pct: if total_steps == 0 {
            0.0
        } else {
            100.0 * violating_steps as f64 / total_steps as f64
        },
        dev: if episodes == 0 { 0.0 } else { dev_sum / episodes as f64 },
        dev_sum,
        fail_count,
        failed_episodes,
        base_seed,
    }
}

/// Seeded evaluation of a deterministic filter against the task's reference
/// controller at one noise level.
pub fn evaluate(
    system: &BenchmarkSystem,
    task: Task,
    noise_level: f64,
    filter: &dyn SafetyFilter,
    episodes: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    let ctrl = task.controller(system, noise_level)?;
    evaluate_with(system, task, &ctrl, noise_level, filter, episodes, base_seed)
}

pub fn evaluate_with(
    system: &BenchmarkSystem,
    task: Task,
    ctrl: &ReferenceController,
    noise_level: f64,
    filter: &dyn SafetyFilter,
    episodes: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    let trajs = run_episodes(system, ctrl, filter, episodes, base_seed)?;
    Ok(summarize(
        system,
        task,
        ctrl,
        noise_level,
        filter.name(),
        &trajs,
        base_seed,
    ))
}
