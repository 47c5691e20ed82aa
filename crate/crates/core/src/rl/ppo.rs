use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam};
use super::gae::{normalize, RolloutBuffer};
use super::policy::{gaussian_log_prob, FilterKind, Policy, PolicyTape, Snapshot};
use super::reward::{compute_reward, RewardConfig};
use crate::envs::{
    env_step, episode_rng, reference_input, sample_initial_state, ReferenceController, Task, EARLY_TERMINATION_SCALE,
};
use crate::error::{Error, Result};
use crate::filters::{
    default_log_std, Checkpoint, CheckpointMetadata, FilterConfig, LqpCheckpoint, LqpParams, Mlp, MlpCheckpoint,
    MlpPolicy, MlpTape, DEFAULT_HIDDEN, DEFAULT_M_QP, DEFAULT_N_QP,
};
use crate::harness::{default_noise_grid, evaluate, EvalReport};
use crate::model::BenchmarkSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub rollout_steps: usize,
    pub total_updates: usize,
    pub value_net_widths: Vec<usize>,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            value_learning_rate: 1e-3,
            epochs_per_update: 10,
            minibatch_size: 512,
            rollout_steps: 4096,
            total_updates: 200,
            value_net_widths: DEFAULT_HIDDEN.to_vec(),
            max_grad_norm: 0.5,
            entropy_coef: 0.0,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in (0, 1]");
        }
        if !(self.clip_ratio > 0.0) {
            return bad("clip_ratio must be positive");
        }
        if !(self.learning_rate > 0.0 && self.value_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.minibatch_size == 0 || self.rollout_steps == 0 || self.epochs_per_update == 0 {
            return bad("minibatch_size, rollout_steps and epochs_per_update must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.value_net_widths.contains(&0) {
            return bad("value_net_widths must be positive");
        }
        Ok(())
    }
}

/// Affine map of `(x, û)` onto roughly unit scale for the value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationScaler {
    center: DVector<f64>,
    scale: DVector<f64>,
}

impl ObservationScaler {
    /// Box centers and half-widths; unbounded coordinates pass unscaled.
    pub fn for_system(system: &BenchmarkSystem) -> Self {
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for b in &system.state_bounds {
            match b {
                Some(b) => {
                    center.push(b.center());
                    scale.push(b.half_width().max(1e-12));
                }
                None => {
                    center.push(0.0);
                    scale.push(1.0);
                }
            }
        }
        for b in &system.input_bounds {
            center.push(b.center());
            scale.push(b.half_width().max(1e-12));
        }
        Self {
            center: DVector::from_vec(center),
            scale: DVector::from_vec(scale),
        }
    }

    pub fn apply(&self, x: &DVector<f64>, u_hat: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        DVector::from_fn(self.center.len(), |i, _| {
            let v = if i < n { x[i] } else { u_hat[i - n] };
            (v - self.center[i]) / self.scale[i]
        })
    }
}

/// State-value critic over `(x, û)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub net: Mlp,
    pub scaler: ObservationScaler,
}

impl ValueFunction {
    pub fn init(system: &BenchmarkSystem, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![system.n_sys() + system.m_sys()];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            net: Mlp::init(&widths, 1.0 / (*widths.last().unwrap() as f64), rng)?,
            scaler: ObservationScaler::for_system(system),
        })
    }

    pub fn forward(&self, x: &DVector<f64>, u_hat: &DVector<f64>) -> Result<MlpTape> {
        self.net.forward(&self.scaler.apply(x, u_hat))
    }

    pub fn value(&self, x: &DVector<f64>, u_hat: &DVector<f64>) -> Result<f64> {
        Ok(self.forward(x, u_hat)?.output[0])
    }
}

/// Episode-level statistics of one collection phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CollectStats {
    pub episodes: usize,
    pub mean_reward: f64,
    pub vio_pct: f64,
    /// Mean per-episode `Σ ‖û − u‖²`.
    pub dev: f64,
    pub early_terminations: usize,
}

/// Rollout collection with the stochastic policy.
#[derive(Debug, Clone)]
pub struct Collector<'a> {
    pub system: &'a BenchmarkSystem,
    pub controllers: Vec<ReferenceController>,
    pub reward: RewardConfig,
    pub early_termination: bool,
}

impl<'a> Collector<'a> {
    pub fn new(
        system: &'a BenchmarkSystem,
        task: Task,
        noise_levels: &[f64],
        reward: RewardConfig,
        early_termination: bool,
    ) -> Result<Self> {
        if noise_levels.is_empty() {
            return Err(Error::InvalidArgument("need at least one training noise level".into()));
        }
        let controllers = noise_levels
            .iter()
            .map(|n| task.controller(system, *n))
            .collect::<Result<_>>()?;
        Ok(Self {
            system,
            controllers,
            reward,
            early_termination,
        })
    }

    /// Gathers `steps` transitions. Each episode draws its reference
    /// controller uniformly from the noise levels and its own seed from `rng`.
    pub fn collect(
        &self,
        snapshot: &Snapshot,
        log_std: &DVector<f64>,
        value: &ValueFunction,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(RolloutBuffer, CollectStats)> {
        let mut buf = RolloutBuffer::default();
        let std = log_std.map(f64::exp);
        let horizon = self.system.episode_length;
        let mut stats = CollectStats::default();
        let mut total_reward = 0.0;
        let mut total_dev = 0.0;
        let mut violations = 0usize;
        while buf.len() < steps {
            let ctrl = &self.controllers[rng.random_range(0..self.controllers.len())];
            let mut ep = episode_rng(rng.random());
            let mut x = sample_initial_state(self.system, &mut ep);
            let mut u_hat = reference_input(ctrl, &x, 0, &mut ep);
            let mut v = value.value(&x, &u_hat)?;
            stats.episodes += 1;
            for t in 0..horizon {
                let (mean, _) = snapshot.forward(&x, &u_hat)?;
                let noise = DVector::from_fn(mean.len(), |i, _| std[i] * ep.sample::<f64, _>(StandardNormal));
                let action = &mean + noise;
                let log_prob = gaussian_log_prob(&action, &mean, log_std);
                let next = env_step(self.system, &x, &action)?;
                let early =
                    self.early_termination && self.system.spec.state_outside_scaled(&next, EARLY_TERMINATION_SCALE);
                let r = compute_reward(&x, &action, &u_hat, &self.system.spec, &self.reward, early)?;
                violations += usize::from(crate::model::check_violation(&x, &action, &self.system.spec)?);
                total_reward += r;
                total_dev += (&u_hat - &action).norm_squared();
                if !r.is_finite() || !next.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("rollout state at step {t}")));
                }
                let truncated = t + 1 == horizon || buf.len() + 1 == steps;
                let (next_u_hat, next_v) = if early {
                    (u_hat.clone(), 0.0)
                } else {
                    let nu = reference_input(ctrl, &next, t + 1, &mut ep);
                    let nv = value.value(&next, &nu)?;
                    (nu, nv)
                };
                buf.x.push(x);
                buf.u_hat.push(u_hat);
                buf.action.push(action);
                buf.log_prob.push(log_prob);
                buf.reward.push(r);
                buf.value.push(v);
                buf.next_value.push(next_v);
                buf.terminal.push(early);
                buf.segment_end.push(early || truncated);
                if early {
                    stats.early_terminations += 1;
                    break;
                }
                if truncated {
                    break;
                }
                x = next;
                u_hat = next_u_hat;
                v = next_v;
            }
        }
        let eps = stats.episodes as f64;
        stats.mean_reward = total_reward / eps;
        stats.dev = total_dev / eps;
        stats.vio_pct = 100.0 * violations as f64 / buf.len() as f64;
        Ok((buf, stats))
    }
}

/// Clipped-surrogate loss and its gradient on one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGrad {
    pub loss: f64,
    /// Gradient in the layout of [`Policy::to_flat`].
    pub grad: Vec<f64>,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Loss `−(1/B) Σ min(r A, clip(r, 1 ± ε) A) − c_H · Σ log_std` over the
/// indexed transitions, with its exact gradient. The derivative flows only
/// through transitions where the unclipped term is the active one.
pub fn policy_gradient(
    policy: &Policy,
    snapshot: &Snapshot,
    buf: &RolloutBuffer,
    advantages: &[f64],
    idx: &[usize],
    clip_ratio: f64,
    entropy_coef: f64,
) -> Result<SurrogateGrad> {
    let log_std = policy.log_std();
    let m = log_std.len();
    let inv_var = log_std.map(|l| (-2.0 * l).exp());
    let bsz = idx.len() as f64;
    let mut tapes: Vec<PolicyTape> = Vec::with_capacity(idx.len());
    let mut grads = Vec::with_capacity(idx.len());
    let mut grad_log_std = DVector::<f64>::zeros(m);
    let (mut loss, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for &k in idx {
        let (mean, tape) = snapshot.forward(&buf.x[k], &buf.u_hat[k])?;
        let a = &buf.action[k];
        let lp = gaussian_log_prob(a, &mean, log_std);
        let log_ratio = lp - buf.log_prob[k];
        let ratio = log_ratio.exp();
        let adv = advantages[k];
        let clipped_ratio = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio);
        let unclipped_term = ratio * adv;
        loss -= unclipped_term.min(clipped_ratio * adv) / bsz;
        kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > clip_ratio {
            clipped += 1;
        }
        let active = if adv >= 0.0 {
            ratio <= 1.0 + clip_ratio
        } else {
            ratio >= 1.0 - clip_ratio
        };
        let coef = if active { -unclipped_term / bsz } else { 0.0 };
        let diff = a - &mean;
        grads.push(diff.component_mul(&inv_var) * coef);
        for i in 0..m {
            let z2 = diff[i] * diff[i] * inv_var[i];
            grad_log_std[i] += coef * (z2 - 1.0);
        }
        tapes.push(tape);
    }
    let mut grad = snapshot.backward(&tapes, &grads)?;
    let off = grad.len() - m;
    for i in 0..m {
        grad[off + i] = grad_log_std[i] - entropy_coef;
    }
    loss -= entropy_coef * log_std.sum();
    Ok(SurrogateGrad {
        loss,
        grad,
        approx_kl: kl / bsz,
        clip_fraction: clipped as f64 / bsz,
    })
}

/// `½ mean (V − target)²` and its gradient in the critic's flat layout.
pub fn value_gradient(value: &ValueFunction, buf: &RolloutBuffer, idx: &[usize]) -> Result<(f64, Vec<f64>)> {
    let bsz = idx.len() as f64;
    let mut grads = value.net.zero_grads();
    let mut loss = 0.0;
    for &k in idx {
        let tape = value.forward(&buf.x[k], &buf.u_hat[k])?;
        let err = tape.output[0] - buf.ret[k];
        loss += 0.5 * err * err / bsz;
        value
            .net
            .backward(&tape, &DVector::from_element(1, err / bsz), &mut grads)?;
    }
    Ok((loss, crate::filters::flatten(&grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: Policy,
    pub value: ValueFunction,
    policy_opt: Adam,
    value_opt: Adam,
}

impl PpoLearner {
    pub fn new(policy: Policy, value: ValueFunction, cfg: &PpoConfig) -> Self {
        let policy_opt = Adam::new(policy.num_params(), cfg.learning_rate);
        let value_opt = Adam::new(value.net.num_params(), cfg.value_learning_rate);
        Self {
            policy,
            value,
            policy_opt,
            value_opt,
        }
    }

    /// Several epochs of shuffled minibatch steps on `buf`, whose advantages
    /// must already be filled in.
    pub fn update(&mut self, buf: &RolloutBuffer, cfg: &PpoConfig, rng: &mut impl Rng) -> Result<UpdateStats> {
        if buf.is_empty() {
            return Err(Error::InvalidArgument("empty rollout buffer".into()));
        }
        let advantages = if cfg.normalize_advantages {
            normalize(&buf.advantage)
        } else {
            buf.advantage.clone()
        };
        let mut order: Vec<usize> = (0..buf.len()).collect();
        let mut stats = UpdateStats::default();
        let mut batches = 0usize;
        for _ in 0..cfg.epochs_per_update {
            order.shuffle(rng);
            for idx in order.chunks(cfg.minibatch_size) {
                let snapshot = self.policy.snapshot()?;
                let mut sg = policy_gradient(
                    &self.policy,
                    &snapshot,
                    buf,
                    &advantages,
                    idx,
                    cfg.clip_ratio,
                    cfg.entropy_coef,
                )?;
                let (vloss, mut vgrad) = value_gradient(&self.value, buf, idx)?;
                if !sg.loss.is_finite() || !vloss.is_finite() || !sg.grad.iter().chain(&vgrad).all(|g| g.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "PPO loss (policy {}, value {}, kl {})",
                        sg.loss, vloss, sg.approx_kl
                    )));
                }
                stats.grad_norm += clip_grad_norm(&mut sg.grad, cfg.max_grad_norm);
                clip_grad_norm(&mut vgrad, cfg.max_grad_norm);

                let mut flat = self.policy.to_flat();
                self.policy_opt.step(&mut flat, &sg.grad);
                self.policy.set_flat(&flat)?;
                let mut vflat = self.value.net.to_flat();
                self.value_opt.step(&mut vflat, &vgrad);
                self.value.net.set_flat(&vflat)?;

                stats.policy_loss += sg.loss;
                stats.value_loss += vloss;
                stats.approx_kl += sg.approx_kl;
                stats.clip_fraction += sg.clip_fraction;
                batches += 1;
            }
        }
        let b = batches as f64;
        stats.policy_loss /= b;
        stats.value_loss /= b;
        stats.approx_kl /= b;
        stats.clip_fraction /= b;
        stats.grad_norm /= b;
        Ok(stats)
    }
}

/// Everything that determines a training run besides the system and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub filter: FilterConfig,
    pub kind: FilterKind,
    pub task: Task,
    pub n_qp: usize,
    pub m_qp: usize,
    pub mlp_hidden: Vec<usize>,
    /// Start the LQP filter from the nominal model's constraint data instead
    /// of a random draw.
    pub warm_start: bool,
    /// Noise levels sampled per training episode; the system's evaluation
    /// grid when absent.
    pub train_noise_levels: Option<Vec<f64>>,
    /// Noise levels scored when selecting the best checkpoint.
    pub eval_noise_levels: Vec<f64>,
    pub eval_episodes: usize,
    pub eval_every: usize,
    pub eval_seed: u64,
    pub early_termination: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            filter: FilterConfig::default(),
            kind: FilterKind::Lqp,
            task: Task::Stabilization,
            n_qp: DEFAULT_N_QP,
            m_qp: DEFAULT_M_QP,
            mlp_hidden: DEFAULT_HIDDEN.to_vec(),
            warm_start: false,
            train_noise_levels: None,
            eval_noise_levels: vec![0.0, 1.0, 2.0],
            eval_episodes: 50,
            eval_every: 5,
            eval_seed: 1_000_000,
            early_termination: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.reward.validate()?;
        self.filter.validate()?;
        if self.n_qp == 0 || self.m_qp == 0 {
            return Err(Error::InvalidArgument("n_qp and m_qp must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_policy(&self, system: &BenchmarkSystem, rng: &mut impl Rng) -> Result<Policy> {
        let log_std = default_log_std(&system.input_bounds);
        Ok(match self.kind {
            FilterKind::Lqp => {
                let params = if self.warm_start {
                    let p =
                        LqpParams::from_model(&system.model, &system.spec, self.filter.horizon, &system.input_bounds)?;
                    if p.n_qp() != self.n_qp {
                        return Err(Error::InvalidArgument(format!(
                            "warm start needs n_qp = m_sys * horizon = {}, got {}",
                            p.n_qp(),
                            self.n_qp
                        )));
                    }
                    p.padded_to(self.m_qp.max(p.m_qp()))?
                } else {
                    LqpParams::init_random(system.n_sys(), &system.input_bounds, self.n_qp, self.m_qp, rng)?
                };
                Policy::Lqp {
                    params,
                    cfg: self.filter,
                }
            }
            FilterKind::Mlp => Policy::Mlp(MlpPolicy::init(system.n_sys(), log_std, &self.mlp_hidden, rng)?),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub vio_pct: f64,
    pub dev: f64,
    pub early_terminations: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_score: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval: Vec<EvalPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub noise_level: f64,
    pub vio_pct: f64,
    pub dev: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-by-evaluation policy.
    pub best: Policy,
    pub best_update: usize,
    pub best_score: f64,
    pub last: Policy,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(
        &self,
        system: &BenchmarkSystem,
        seed: u64,
        cfg: &TrainConfig,
        git_rev: &str,
    ) -> Result<Checkpoint> {
        let metadata = CheckpointMetadata {
            system: system.name.clone(),
            seed,
            git_rev: git_rev.to_string(),
            config: serde_json::to_value(cfg)?,
        };
        Ok(match &self.best {
            Policy::Lqp { params, cfg } => Checkpoint::Lqp(LqpCheckpoint::new(params, cfg, metadata)),
            Policy::Mlp(m) => Checkpoint::Mlp(MlpCheckpoint::new(m, metadata)),
        })
    }
}

/// Checkpoint-selection score: lower is better. Violations weigh ten times a
/// unit of deviation.
pub fn eval_score(reports: &[EvalReport]) -> f64 {
    reports.iter().map(|r| 10.0 * r.vio_pct + r.dev).sum()
}

pub fn evaluate_policy(system: &BenchmarkSystem, policy: &Policy, cfg: &TrainConfig) -> Result<Vec<EvalReport>> {
    let filter = policy.filter()?;
    cfg.eval_noise_levels
        .iter()
        .map(|n| evaluate(system, cfg.task, *n, filter.as_ref(), cfg.eval_episodes, cfg.eval_seed))
        .collect()
}

/// PPO training. Writes one JSON line per update to `log_out` when given and
/// returns the best policy by evaluation score.
pub fn train(
    system: &BenchmarkSystem,
    cfg: &TrainConfig,
    seed: u64,
    log_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = cfg.initial_policy(system, &mut rng)?;
    train_with_rng(system, cfg, policy, rng, log_out)
}

/// PPO training starting from a given policy, e.g. a loaded checkpoint.
pub fn train_from(
    system: &BenchmarkSystem,
    cfg: &TrainConfig,
    seed: u64,
    policy: Policy,
    log_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_with_rng(system, cfg, policy, ChaCha8Rng::seed_from_u64(seed), log_out)
}

fn train_with_rng(
    system: &BenchmarkSystem,
    cfg: &TrainConfig,
    policy: Policy,
    mut rng: ChaCha8Rng,
    mut log_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let value = ValueFunction::init(system, &cfg.ppo.value_net_widths, &mut rng)?;
    let levels = cfg
        .train_noise_levels
        .clone()
        .unwrap_or_else(|| default_noise_grid(system).to_vec());
    let collector = Collector::new(system, cfg.task, &levels, cfg.reward, cfg.early_termination)?;
    let mut learner = PpoLearner::new(policy, value, &cfg.ppo);

    let score_of = |p: &Policy| -> Result<(f64, Vec<EvalPoint>)> {
        let reports = evaluate_policy(system, p, cfg)?;
        let points = reports
            .iter()
            .map(|r| EvalPoint {
                noise_level: r.noise_level,
                vio_pct: r.vio_pct,
                dev: r.dev,
            })
            .collect();
        Ok((eval_score(&reports), points))
    };
    let (mut best_score, _) = score_of(&learner.policy)?;
    let mut best = learner.policy.clone();
    let mut best_update = 0;
    let mut log = Vec::with_capacity(cfg.ppo.total_updates);

    for update in 1..=cfg.ppo.total_updates {
        let snapshot = learner.policy.snapshot()?;
        let log_std = learner.policy.log_std().clone();
        let (mut buf, cstats) =
            collector.collect(&snapshot, &log_std, &learner.value, cfg.ppo.rollout_steps, &mut rng)?;
        buf.compute_advantages(cfg.ppo.gamma, cfg.ppo.gae_lambda);
        let ustats = learner
            .update(&buf, &cfg.ppo, &mut rng)
            .map_err(|e| Error::InvalidArgument(format!("update {update}: {e}")))?;

        let mut record = LogRecord {
            update,
            mean_reward: cstats.mean_reward,
            vio_pct: cstats.vio_pct,
            dev: cstats.dev,
            early_terminations: cstats.early_terminations,
            policy_loss: ustats.policy_loss,
            value_loss: ustats.value_loss,
            approx_kl: ustats.approx_kl,
            clip_fraction: ustats.clip_fraction,
            eval_score: None,
            eval: Vec::new(),
        };
        if update % cfg.eval_every == 0 || update == cfg.ppo.total_updates {
            let (score, points) = score_of(&learner.policy)?;
            record.eval_score = Some(score);
            record.eval = points;
            if score < best_score {
                best_score = score;
                best = learner.policy.clone();
                best_update = update;
            }
        }
        log::info!(
            "update {update}: reward {:.3} vio {:.2}% dev {:.3} kl {:.4} score {:?}",
            record.mean_reward,
            record.vio_pct,
            record.dev,
            record.approx_kl,
            record.eval_score
        );
        if let Some(out) = log_out.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        log.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_update,
        best_score,
        last: learner.policy,
        log,
    })
}
