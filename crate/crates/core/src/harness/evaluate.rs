//! Deterministic evaluation rollouts and the cost-estimation bias probe.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::approximator::{sample_action, ActionBox, GaussianPolicy, QuantileEnsemble};
use crate::envs::{mc_oracle, Cmdp, EnvRng, EnvState, FrozenPolicy, OracleSettings};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode_return: f64,
    pub episode_cost: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub median_return: f64,
    pub mean_cost: f64,
    /// Fraction of episodes whose cost exceeded the episode limit.
    pub violation_rate: f64,
    pub records: Vec<EpisodeRecord>,
}

impl EvalSummary {
    fn from_records(records: Vec<EpisodeRecord>, cost_limit: f64) -> Self {
        let n = records.len();
        if n == 0 {
            return Self {
                episodes: 0,
                mean_return: 0.0,
                median_return: 0.0,
                mean_cost: 0.0,
                violation_rate: 0.0,
                records,
            };
        }
        let nf = n as f64;
        let mut returns: Vec<f64> = records.iter().map(|r| r.episode_return).collect();
        returns.sort_unstable_by(f64::total_cmp);
        let median_return = if n % 2 == 1 {
            returns[n / 2]
        } else {
            0.5 * (returns[n / 2 - 1] + returns[n / 2])
        };
        Self {
            episodes: n,
            mean_return: records.iter().map(|r| r.episode_return).sum::<f64>() / nf,
            median_return,
            mean_cost: records.iter().map(|r| r.episode_cost).sum::<f64>() / nf,
            violation_rate: records.iter().filter(|r| r.episode_cost > cost_limit).count() as f64 / nf,
            records,
        }
    }
}

/// The target policy's mean action, clipped; no exploration shift.
pub struct MeanPolicy<'a> {
    pub policy: &'a GaussianPolicy,
    pub action_box: &'a ActionBox,
}

impl FrozenPolicy for MeanPolicy<'_> {
    fn act(&self, obs: &[f64], _rng: &mut EnvRng) -> Vec<f64> {
        let mut a = match self.policy.policy_forward(obs) {
            Ok(out) => out.mu,
            Err(_) => vec![0.0; self.policy.act_dim()],
        };
        self.action_box.clip(&mut a);
        a
    }
}

/// Samples from the target Gaussian, clipped to the box.
pub struct SampledPolicy<'a> {
    pub policy: &'a GaussianPolicy,
    pub action_box: &'a ActionBox,
}

impl FrozenPolicy for SampledPolicy<'_> {
    fn act(&self, obs: &[f64], rng: &mut EnvRng) -> Vec<f64> {
        match self.policy.policy_forward(obs) {
            Ok(out) => sample_action(&out, rng, self.action_box).0,
            Err(_) => vec![0.0; self.policy.act_dim()],
        }
    }
}

/// Runs one episode; returns the record and the visited states (before each action).
pub fn rollout_episode(env: &dyn Cmdp, policy: &dyn FrozenPolicy, seed: u64) -> (EpisodeRecord, Vec<EnvState>) {
    let mut rng = EnvRng::seed_from_u64(seed);
    let mut state = env.reset(&mut rng);
    let mut visited = Vec::with_capacity(env.horizon());
    let (mut ret, mut cost, mut length) = (0.0, 0.0, 0);
    loop {
        let action = policy.act(&env.observe(&state), &mut rng);
        visited.push(state.clone());
        let step = env.step(&state, &action, &mut rng);
        ret += step.reward;
        cost += step.cost;
        length += 1;
        if step.terminated || step.truncated {
            break;
        }
        state = step.next_state;
    }
    let record = EpisodeRecord {
        seed,
        episode_return: ret,
        episode_cost: cost,
        length,
    };
    (record, visited)
}

/// Episodes `seed, seed + 1, ...` under the deterministic mean policy.
pub fn evaluate_policy(
    env: &dyn Cmdp,
    policy: &GaussianPolicy,
    n_episodes: usize,
    seed: u64,
    cost_limit: f64,
) -> (EvalSummary, Vec<Vec<EnvState>>) {
    let box_ = env.action_box();
    let mean = MeanPolicy {
        policy,
        action_box: &box_,
    };
    let mut trajectories = Vec::with_capacity(n_episodes);
    let records = (0..n_episodes as u64)
        .map(|i| {
            let (rec, visited) = rollout_episode(env, &mean, seed.wrapping_add(i));
            trajectories.push(visited);
            rec
        })
        .collect();
    (EvalSummary::from_records(records, cost_limit), trajectories)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Mean of critic minus oracle.
    pub signed: f64,
    /// Mean of the absolute difference.
    pub abs: f64,
    pub oracle_mean: f64,
    pub critic_mean: f64,
}

/// Compares the cost critic's mean estimate with Monte-Carlo ground truth at
/// `states`, for actions sampled from the target policy.
pub fn cost_bias(
    env: &dyn Cmdp,
    policy: &GaussianPolicy,
    cost: &QuantileEnsemble,
    states: &[EnvState],
    settings: OracleSettings,
    seed: u64,
) -> Result<BiasReport> {
    let box_ = env.action_box();
    let sampled = SampledPolicy {
        policy,
        action_box: &box_,
    };
    let mut rng = EnvRng::seed_from_u64(seed);
    let (mut signed, mut abs, mut oracle_sum, mut critic_sum) = (0.0, 0.0, 0.0, 0.0);
    for s in states {
        let obs = env.observe(s);
        let action = sampled.act(&obs, &mut rng);
        let critic = cost.predict_atoms(&obs, &action)?.mean();
        let oracle = mc_oracle(env, &sampled, s, &action, settings, &mut rng)?.mean_cost;
        signed += critic - oracle;
        abs += (critic - oracle).abs();
        oracle_sum += oracle;
        critic_sum += critic;
    }
    let n = states.len().max(1) as f64;
    Ok(BiasReport {
        signed: signed / n,
        abs: abs / n,
        oracle_mean: oracle_sum / n,
        critic_mean: critic_sum / n,
    })
}

/// `count` states spread evenly over a trajectory.
pub fn spread_states(trajectory: &[EnvState], count: usize) -> Vec<EnvState> {
    if trajectory.is_empty() || count == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|k| trajectory[k * trajectory.len() / count].clone())
        .collect()
}
