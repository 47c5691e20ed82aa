//! PPO training of the learnable filters.

mod adam;
mod gae;
mod policy;
mod ppo;
mod reward;

pub use adam::{clip_grad_norm, Adam};
pub use gae::{gae_advantages, normalize, RolloutBuffer};
pub use policy::{gaussian_log_prob, FilterKind, Policy, PolicyTape, Snapshot};
pub use ppo::{
    eval_score, evaluate_policy, policy_gradient, train, train_from, value_gradient, CollectStats, Collector,
    EvalPoint, LogRecord, ObservationScaler, PpoConfig, PpoLearner, SurrogateGrad, TrainConfig, TrainOutcome,
    UpdateStats, ValueFunction,
};
pub use reward::{compute_reward, reward_terms, RewardConfig, RewardTerms};
