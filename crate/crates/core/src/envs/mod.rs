//! Benchmark plants, reference controllers and closed-loop rollouts.

mod lqr;
mod plant;

pub use lqr::{closed_loop_spectral_radius, lqr_gain, RICCATI_MAX_ITER, RICCATI_TOL};
pub use plant::{cartpole_derivative, cartpole_energy, cartpole_rk4, cartpole_step, env_step, CARTPOLE_SUBSTEPS};

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::SafetyFilter;
use crate::model::{check_violation, BenchmarkSystem};
use crate::rl::{compute_reward, RewardConfig};

/// Scale of the state box, about its witness point, beyond which an episode
/// is cut short.
pub const EARLY_TERMINATION_SCALE: f64 = 2.0;

/// Noise standard deviation per unit of noise level.
pub const NOISE_STD_PER_LEVEL: f64 = 0.25;

/// Additive Gaussian perturbation of a reference input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub mean: f64,
    pub sigma: f64,
}

impl Noise {
    pub const NONE: Noise = Noise { mean: 0.0, sigma: 0.0 };

    /// Zero-mean noise whose standard deviation grows with the level `n`.
    pub fn from_level(n: f64) -> Self {
        Noise {
            mean: 0.0,
            sigma: NOISE_STD_PER_LEVEL * n.abs(),
        }
    }

    fn sample(&self, m: usize, rng: &mut impl Rng) -> DVector<f64> {
        if self.sigma == 0.0 {
            return DVector::from_element(m, self.mean);
        }
        DVector::from_fn(m, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            self.mean + self.sigma * z
        })
    }
}

impl Default for Noise {
    fn default() -> Self {
        Self::NONE
    }
}

/// Which reference the filter is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// LQR towards the origin plus noise.
    Stabilization,
    /// One sine wave per episode plus noise.
    Tracking,
}

impl Task {
    pub fn controller(&self, system: &BenchmarkSystem, noise_level: f64) -> Result<ReferenceController> {
        match self {
            Task::Stabilization => ReferenceController::default_lqr(system, noise_level),
            Task::Tracking => ReferenceController::default_sinusoid(system, noise_level),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Stabilization => "stabilization",
            Task::Tracking => "tracking",
        }
    }
}

/// Source of the proposed input `û`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceController {
    LqrNoise {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gain: DMatrix<f64>,
        noise: Noise,
    },
    Sinusoid {
        amplitude: DVector<f64>,
        period: f64,
        noise: Noise,
    },
    BangBang {
        u_mag: DVector<f64>,
        t_switch: usize,
        noise: Noise,
    },
}

impl ReferenceController {
    pub fn lqr_noise(system: &BenchmarkSystem, q: DMatrix<f64>, r: DMatrix<f64>, noise: Noise) -> Result<Self> {
        if q.clone().symmetric_eigenvalues().iter().any(|v| *v < -1e-12) {
            return Err(Error::InvalidArgument("Q must be positive semidefinite".into()));
        }
        check_noise(&noise)?;
        let gain = lqr_gain(&system.model, &q, &r)?;
        Ok(Self::LqrNoise { q, r, gain, noise })
    }

    /// LQR with `Q = I`, `R = I` and noise of level `n`.
    pub fn default_lqr(system: &BenchmarkSystem, n: f64) -> Result<Self> {
        let (ns, ms) = (system.n_sys(), system.m_sys());
        Self::lqr_noise(
            system,
            DMatrix::identity(ns, ns),
            DMatrix::identity(ms, ms),
            Noise::from_level(n),
        )
    }

    /// One sine wave per episode with amplitude equal to the input bound.
    pub fn default_sinusoid(system: &BenchmarkSystem, n: f64) -> Result<Self> {
        let amplitude = DVector::from_iterator(
            system.m_sys(),
            system.input_bounds.iter().map(|b| b.hi.abs().min(b.lo.abs())),
        );
        Self::sinusoid(amplitude, system.episode_length as f64, Noise::from_level(n))
    }

    pub fn sinusoid(amplitude: DVector<f64>, period: f64, noise: Noise) -> Result<Self> {
        if !(period.is_finite() && period != 0.0) || amplitude.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(
                "sinusoid needs finite amplitude and nonzero period".into(),
            ));
        }
        check_noise(&noise)?;
        Ok(Self::Sinusoid {
            amplitude,
            period,
            noise,
        })
    }

    pub fn bang_bang(u_mag: DVector<f64>, t_switch: usize, noise: Noise) -> Result<Self> {
        if u_mag.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("bang-bang magnitude must be finite".into()));
        }
        check_noise(&noise)?;
        Ok(Self::BangBang { u_mag, t_switch, noise })
    }

    pub fn noise(&self) -> Noise {
        match self {
            Self::LqrNoise { noise, .. } | Self::Sinusoid { noise, .. } | Self::BangBang { noise, .. } => *noise,
        }
    }

    /// Same controller with a different noise term.
    pub fn with_noise(&self, noise: Noise) -> Self {
        let mut c = self.clone();
        match &mut c {
            Self::LqrNoise { noise: n, .. } | Self::Sinusoid { noise: n, .. } | Self::BangBang { noise: n, .. } => {
                *n = noise
            }
        }
        c
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::LqrNoise { .. } => "lqr_noise",
            Self::Sinusoid { .. } => "sinusoid",
            Self::BangBang { .. } => "bang_bang",
        }
    }
}

fn check_noise(noise: &Noise) -> Result<()> {
    if noise.mean.is_finite() && noise.sigma.is_finite() && noise.sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid noise {noise:?}")))
    }
}

pub fn reference_input(ctrl: &ReferenceController, x: &DVector<f64>, t: usize, rng: &mut impl Rng) -> DVector<f64> {
    match ctrl {
        ReferenceController::LqrNoise { gain, noise, .. } => -(gain * x) + noise.sample(gain.nrows(), rng),
        ReferenceController::Sinusoid {
            amplitude,
            period,
            noise,
        } => {
            let phase = (2.0 * PI * t as f64 / period).sin();
            amplitude * phase + noise.sample(amplitude.len(), rng)
        }
        ReferenceController::BangBang { u_mag, t_switch, noise } => {
            let base = if t < *t_switch {
                u_mag.clone()
            } else {
                DVector::zeros(u_mag.len())
            };
            base + noise.sample(u_mag.len(), rng)
        }
    }
}

/// Uniform draw from the state box shrunk about its center; 10% for the
/// nonlinear plant and 50% otherwise. Unbounded coordinates start at zero.
pub fn sample_initial_state(system: &BenchmarkSystem, rng: &mut impl Rng) -> DVector<f64> {
    let frac = if system.nonlinear() { 0.1 } else { 0.5 };
    DVector::from_iterator(
        system.n_sys(),
        system.state_bounds.iter().map(|b| match b {
            Some(b) => {
                let s = b.scaled(frac);
                s.lo + (s.hi - s.lo) * rng.random::<f64>()
            }
            None => 0.0,
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    EarlyViolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub violated: Vec<bool>,
    pub filter_failed: Vec<bool>,
    pub rewards: Option<Vec<f64>>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn violations(&self) -> usize {
        self.violated.iter().filter(|v| **v).count()
    }

    pub fn failures(&self) -> usize {
        self.filter_failed.iter().filter(|v| **v).count()
    }

    /// `Σ_t ‖û_t − u_t‖²`.
    pub fn deviation(&self) -> f64 {
        self.u_hat
            .iter()
            .zip(&self.u)
            .map(|(a, b)| (a - b).norm_squared())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let n = self.xs.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut out = String::from("t");
        for i in 0..n {
            write!(out, ",x{i}").unwrap();
        }
        for i in 0..m {
            write!(out, ",u_hat{i}").unwrap();
        }
        for i in 0..m {
            write!(out, ",u{i}").unwrap();
        }
        out.push_str(",violated,reward\n");
        for t in 0..self.steps() {
            write!(out, "{t}").unwrap();
            for v in self.xs[t].iter().chain(self.u_hat[t].iter()).chain(self.u[t].iter()) {
                write!(out, ",{v:e}").unwrap();
            }
            write!(out, ",{}", u8::from(self.violated[t])).unwrap();
            match &self.rewards {
                Some(r) => writeln!(out, ",{:e}", r[t]).unwrap(),
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub steps: usize,
    pub early_termination: bool,
}

/// Episode RNG: the initial state is drawn first, then the reference noise.
pub fn episode_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rollout(
    system: &BenchmarkSystem,
    ctrl: &ReferenceController,
    filter: &dyn SafetyFilter,
    opts: RolloutOptions,
    seed: u64,
    reward_cfg: Option<&RewardConfig>,
) -> Result<Trajectory> {
    let mut rng = episode_rng(seed);
    let x0 = sample_initial_state(system, &mut rng);
    rollout_from(system, ctrl, filter, opts, x0, &mut rng, reward_cfg)
}

pub fn rollout_from(
    system: &BenchmarkSystem,
    ctrl: &ReferenceController,
    filter: &dyn SafetyFilter,
    opts: RolloutOptions,
    x0: DVector<f64>,
    rng: &mut impl Rng,
    reward_cfg: Option<&RewardConfig>,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        xs: vec![x0],
        u_hat: Vec::with_capacity(opts.steps),
        u: Vec::with_capacity(opts.steps),
        violated: Vec::with_capacity(opts.steps),
        filter_failed: Vec::with_capacity(opts.steps),
        rewards: reward_cfg.map(|_| Vec::with_capacity(opts.steps)),
        termination: Termination::Horizon,
    };
    for t in 0..opts.steps {
        let x = traj.xs[t].clone();
        let u_hat = reference_input(ctrl, &x, t, rng);
        let (u, failed) = match filter.apply(&x, &u_hat) {
            Ok(u) => (u, false),
            Err(Error::FilterFailure(msg)) => {
                log::debug!("filter failure at step {t}: {msg}");
                (u_hat.clone(), true)
            }
            Err(e) => return Err(e),
        };
        let violated = check_violation(&x, &u, &system.spec)?;
        let next = env_step(system, &x, &u)?;
        let early = opts.early_termination && system.spec.state_outside_scaled(&next, EARLY_TERMINATION_SCALE);
        if let (Some(cfg), Some(rewards)) = (reward_cfg, traj.rewards.as_mut()) {
            rewards.push(compute_reward(&x, &u, &u_hat, &system.spec, cfg, early)?);
        }
        traj.u_hat.push(u_hat);
        traj.u.push(u);
        traj.violated.push(violated);
        traj.filter_failed.push(failed);
        traj.xs.push(next);
        if early {
            traj.termination = Termination::EarlyViolation;
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::Passthrough;
    use crate::model::load_benchmark;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn bang_bang_switches_off() {
        let c = ReferenceController::bang_bang(v(&[0.3]), 30, Noise::NONE).unwrap();
        let mut rng = episode_rng(0);
        let x = v(&[0.0, 0.0]);
        assert_eq!(reference_input(&c, &x, 29, &mut rng), v(&[0.3]));
        assert_eq!(reference_input(&c, &x, 30, &mut rng), v(&[0.0]));
    }

    #[test]
    fn sinusoid_starts_at_zero() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_sinusoid(&s, 0.0).unwrap();
        let u = reference_input(&c, &v(&[0.1, 0.2]), 0, &mut episode_rng(0));
        assert_eq!(u, v(&[0.0]));
        let quarter = reference_input(&c, &v(&[0.0, 0.0]), 25, &mut episode_rng(0));
        assert!((quarter[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_lqr_at_origin_is_zero() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_lqr(&s, 0.0).unwrap();
        assert_eq!(reference_input(&c, &v(&[0.0, 0.0]), 3, &mut episode_rng(1)), v(&[0.0]));
    }

    #[test]
    fn noise_statistics() {
        let noise = Noise { mean: 1.0, sigma: 0.5 };
        let mut rng = episode_rng(7);
        let draws: Vec<f64> = (0..20_000).map(|_| noise.sample(1, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
        assert!((var.sqrt() - 0.5).abs() < 0.02);
    }

    #[test]
    fn passthrough_from_origin_stays_put() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_lqr(&s, 0.0).unwrap();
        let opts = RolloutOptions {
            steps: s.episode_length,
            early_termination: false,
        };
        let traj = rollout_from(&s, &c, &Passthrough, opts, v(&[0.0, 0.0]), &mut episode_rng(0), None).unwrap();
        assert!(traj.xs.iter().all(|x| x.amax() == 0.0));
        assert_eq!(traj.violations(), 0);
        assert_eq!(traj.deviation(), 0.0);
    }

    #[test]
    fn rollouts_are_deterministic_and_flags_recompute() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_lqr(&s, 1.0).unwrap();
        let opts = RolloutOptions {
            steps: 100,
            early_termination: false,
        };
        let a = rollout(&s, &c, &Passthrough, opts, 11, None).unwrap();
        let b = rollout(&s, &c, &Passthrough, opts, 11, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.xs.len(), a.u.len() + 1);
        for t in 0..a.steps() {
            assert_eq!(a.violated[t], check_violation(&a.xs[t], &a.u[t], &s.spec).unwrap());
        }
        assert!(a.violations() > 0);
    }

    #[test]
    fn early_termination_cuts_episode() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::bang_bang(v(&[0.5]), 100, Noise::NONE).unwrap();
        let opts = RolloutOptions {
            steps: 100,
            early_termination: true,
        };
        let cfg = RewardConfig::default();
        let traj = rollout_from(
            &s,
            &c,
            &Passthrough,
            opts,
            v(&[0.0, 0.0]),
            &mut episode_rng(0),
            Some(&cfg),
        )
        .unwrap();
        assert_eq!(traj.termination, Termination::EarlyViolation);
        assert!(traj.steps() < 100);
        assert!(*traj.rewards.as_ref().unwrap().last().unwrap() < -cfg.k5 + 1.0);
    }

    #[test]
    fn noiseless_lqr_settles_double_integrator() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_lqr(&s, 0.0).unwrap();
        for x0 in s.state_box_set().unwrap().vertices() {
            let opts = RolloutOptions {
                steps: s.episode_length,
                early_termination: false,
            };
            let traj = rollout_from(&s, &c, &Passthrough, opts, x0, &mut episode_rng(0), None).unwrap();
            assert!(traj.xs.last().unwrap().norm() <= 1e-3);
        }
    }

    #[test]
    fn tank_has_a_slow_nearly_uncontrollable_mode() {
        // Settling to 1e-3 within one episode is out of reach for the tank:
        // the closed loop keeps a pole near 0.984 under any LQR weighting.
        let s = load_benchmark("quadruple_tank").unwrap();
        for w in [1.0, 100.0] {
            let k = lqr_gain(&s.model, &(DMatrix::identity(4, 4) * w), &DMatrix::identity(2, 2)).unwrap();
            let rho = closed_loop_spectral_radius(&s.model, &k);
            assert!(rho > 0.98 && rho < 1.0, "{rho}");
        }
        let c = ReferenceController::default_lqr(&s, 0.0).unwrap();
        let opts = RolloutOptions {
            steps: s.episode_length,
            early_termination: false,
        };
        let x0 = DVector::from_element(4, 20.0);
        let traj = rollout_from(&s, &c, &Passthrough, opts, x0, &mut episode_rng(0), None).unwrap();
        let last = traj.xs.last().unwrap().norm();
        assert!(last > 1.0 && last < 2.0, "{last}");
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = load_benchmark("double_integrator").unwrap();
        let c = ReferenceController::default_lqr(&s, 0.5).unwrap();
        let opts = RolloutOptions {
            steps: 5,
            early_termination: false,
        };
        let traj = rollout(&s, &c, &Passthrough, opts, 3, None).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x0,x1,u_hat0,u0,violated,reward");
        assert_eq!(lines.count(), 5);
    }
}
