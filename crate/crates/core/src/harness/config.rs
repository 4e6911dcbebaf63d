//! Training configuration: sectioned TOML with every key defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{ToySparseGoalSpec, ToyVelocitySpec};
use crate::error::{CoxqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    ToyVelocity,
    ToySparseGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub env: EnvKind,
    pub seed: u64,
    pub total_steps: u64,
    pub out_dir: PathBuf,
    /// Cost-aware optimistic exploration; off means plain Gaussian sampling.
    pub cox: bool,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Evaluation states sampled for the cost-estimation bias, 0 disables it.
    pub bias_states: usize,
    pub bias_rollouts: usize,
    pub bias_horizon: usize,
    /// Periodic checkpoint cadence in environment steps, 0 writes only at the end.
    pub checkpoint_interval: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env: EnvKind::ToyVelocity,
            seed: 0,
            total_steps: 150_000,
            out_dir: PathBuf::from("runs/default"),
            cox: true,
            log_interval: 1000,
            eval_interval: 5000,
            eval_episodes: 20,
            bias_states: 10,
            bias_rollouts: 100,
            bias_horizon: 460,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_entropy: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub initial_steps: u64,
    pub buffer_size: usize,
    pub parallel_envs: usize,
    /// Gradient steps after each round of parallel environment steps.
    pub gradient_steps: usize,
    /// Polyak step cadence, in gradient steps.
    pub target_update_interval: u64,
    pub entropy_auto_tune: bool,
    pub initial_alpha: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub mean_box_weight: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_entropy: 3e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            initial_steps: 10_240,
            buffer_size: 1_024_000,
            parallel_envs: 1,
            gradient_steps: 1,
            target_update_interval: 1,
            entropy_auto_tune: true,
            initial_alpha: 1.0,
            target_entropy: None,
            policy_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            mean_box_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub n_reward_critics: usize,
    pub n_cost_critics: usize,
    pub n_quantiles: usize,
    pub k_r: usize,
    pub k_c: usize,
    pub beta_r: f64,
    pub beta_c: f64,
    pub cvar_alpha: usize,
    pub huber_kappa: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        Self {
            n_reward_critics: 5,
            n_cost_critics: 5,
            n_quantiles: 25,
            k_r: 2,
            k_c: 5,
            beta_r: 4.0,
            beta_c: 3.0,
            cvar_alpha: 13,
            huber_kappa: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSection {
    pub episode_cost_limit: f64,
    pub alm_c: f64,
    pub lambda_init: f64,
    pub lr_lambda: f64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            episode_cost_limit: 5.0,
            alm_c: 10.0,
            lambda_init: 1.0,
            lr_lambda: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationSection {
    pub delta_max: f64,
    pub delta_min: f64,
    /// Starting radius; defaults to `delta_max`.
    pub delta_init: Option<f64>,
    pub lr_delta: f64,
    /// Environment steps in the recent-cost window.
    pub recent_window: usize,
}

impl Default for ExplorationSection {
    fn default() -> Self {
        Self {
            delta_max: 6.0,
            delta_min: 1e-4,
            delta_init: None,
            lr_delta: 1e-4,
            recent_window: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub run: RunSection,
    pub agent: AgentSection,
    pub critic: CriticSection,
    pub constraint: ConstraintSection,
    pub exploration: ExplorationSection,
    pub toy_velocity: ToyVelocitySpec,
    pub toy_sparse_goal: ToySparseGoalSpec,
}

fn bad(msg: impl Into<String>) -> CoxqError {
    CoxqError::Config(msg.into())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn horizon(&self) -> usize {
        match self.run.env {
            EnvKind::ToyVelocity => self.toy_velocity.horizon,
            EnvKind::ToySparseGoal => self.toy_sparse_goal.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.log_interval == 0 || r.eval_interval == 0 {
            return Err(bad("run.log_interval and run.eval_interval must be >= 1"));
        }
        if r.bias_states > 0 && (r.bias_rollouts == 0 || r.bias_horizon == 0) {
            return Err(bad("run.bias_rollouts and run.bias_horizon must be >= 1 when bias states are sampled"));
        }
        let a = &self.agent;
        for (name, lr) in [("lr_actor", a.lr_actor), ("lr_critic", a.lr_critic), ("lr_entropy", a.lr_entropy)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(bad(format!("agent.{name} must be > 0")));
            }
        }
        if a.batch_size == 0 || a.buffer_size < a.batch_size {
            return Err(bad("agent.batch_size must be >= 1 and <= agent.buffer_size"));
        }
        if !(a.gamma > 0.0 && a.gamma < 1.0) {
            return Err(bad("agent.gamma must lie in (0, 1)"));
        }
        if !(a.tau > 0.0 && a.tau <= 1.0) {
            return Err(bad("agent.tau must lie in (0, 1]"));
        }
        if a.parallel_envs == 0 || a.target_update_interval == 0 {
            return Err(bad("agent.parallel_envs and agent.target_update_interval must be >= 1"));
        }
        if !(a.initial_alpha > 0.0) || !(a.mean_box_weight >= 0.0) {
            return Err(bad("agent.initial_alpha must be > 0 and agent.mean_box_weight >= 0"));
        }
        if a.policy_hidden.contains(&0) || a.critic_hidden.contains(&0) {
            return Err(bad("hidden layer widths must be >= 1"));
        }
        let c = &self.critic;
        if c.n_reward_critics == 0 || c.n_cost_critics == 0 || c.n_quantiles == 0 {
            return Err(bad("critic ensemble sizes and n_quantiles must be >= 1"));
        }
        if c.k_r >= c.n_reward_critics * c.n_quantiles || c.k_c >= c.n_cost_critics * c.n_quantiles {
            return Err(bad("truncation must leave at least one pooled atom"));
        }
        if c.cvar_alpha == 0 || c.cvar_alpha > c.n_quantiles {
            return Err(bad("critic.cvar_alpha must lie in [1, n_quantiles]"));
        }
        if !(c.beta_r >= 0.0 && c.beta_c >= 0.0 && c.huber_kappa > 0.0) {
            return Err(bad("critic betas must be >= 0 and huber_kappa > 0"));
        }
        let k = &self.constraint;
        if !(k.episode_cost_limit >= 0.0 && k.alm_c > 0.0 && k.lambda_init >= 0.0 && k.lr_lambda >= 0.0) {
            return Err(bad("constraint values out of range"));
        }
        let e = &self.exploration;
        let init = e.delta_init.unwrap_or(e.delta_max);
        if !(e.delta_min > 0.0 && e.delta_min <= init && init <= e.delta_max && e.lr_delta >= 0.0) {
            return Err(bad("exploration needs 0 < delta_min <= delta_init <= delta_max"));
        }
        if e.recent_window == 0 {
            return Err(bad("exploration.recent_window must be >= 1"));
        }
        self.toy_velocity.validate()?;
        crate::envs::ToySparseGoal::new(self.toy_sparse_goal)?;
        Ok(())
    }
}
