//! The collect / store / update loop, with periodic logging, evaluation and
//! checkpointing.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{EnvKind, TrainConfig};
use super::evaluate::{cost_bias, evaluate_policy, spread_states, EvalSummary};
use super::metrics::{flush_metrics, parse_jsonl, to_jsonl, Losses, MetricsRecord};
use super::replay::{ReplayBuffer, Transition};
use crate::approximator::{
    sample_action, Activation, AdamState, Dense, GaussianPolicy, GaussianPolicyOutput, Mlp, QuantileEnsemble,
};
use crate::envs::{Cmdp, EnvRng, EnvState, OracleSettings, ToySparseGoal, ToyVelocity};
use crate::error::{CoxqError, Result};
use crate::learner::{Learner, LagrangianState, LearnerConfig, TemperatureState};
use crate::quantile_critics::{BoundConfig, TruncationSpec};
use crate::step_control::{explore, TrustRegion};

pub fn build_env(cfg: &TrainConfig) -> Result<Box<dyn Cmdp>> {
    Ok(match cfg.run.env {
        EnvKind::ToyVelocity => Box::new(ToyVelocity::new(cfg.toy_velocity)?),
        EnvKind::ToySparseGoal => Box::new(ToySparseGoal::new(cfg.toy_sparse_goal)?),
    })
}

/// Fresh networks and optimizer state for a config, seeded from `rng`.
pub fn build_learner(cfg: &TrainConfig, env: &dyn Cmdp, rng: &mut ChaCha8Rng) -> Result<Learner> {
    let obs = env.obs_dim();
    let action_box = env.action_box();
    let act = action_box.dim();
    let a = &cfg.agent;
    let c = &cfg.critic;
    let policy = GaussianPolicy::new(obs, act, &a.policy_hidden, rng);
    let reward = QuantileEnsemble::new(obs, act, &a.critic_hidden, c.n_reward_critics, c.n_quantiles, rng);
    let cost = QuantileEnsemble::new(obs, act, &a.critic_hidden, c.n_cost_critics, c.n_quantiles, rng);
    let k = &cfg.constraint;
    let lagrangian = LagrangianState::new(
        k.lambda_init,
        k.lr_lambda,
        k.alm_c,
        k.episode_cost_limit,
        env.horizon(),
        a.gamma,
    )?;
    let target_entropy = a.target_entropy.unwrap_or(-(act as f64));
    let temperature = TemperatureState::new(a.initial_alpha, target_entropy, a.lr_entropy, a.entropy_auto_tune)?;
    let config = LearnerConfig {
        gamma: a.gamma,
        lr_actor: a.lr_actor,
        lr_critic: a.lr_critic,
        huber_kappa: c.huber_kappa,
        truncation: TruncationSpec { k_r: c.k_r, k_c: c.k_c },
        bounds: BoundConfig {
            beta_r: c.beta_r,
            beta_c: c.beta_c,
            alpha: c.cvar_alpha,
        },
        entropy_bonus: true,
        mean_box_weight: a.mean_box_weight,
    };
    Learner::new(policy, reward, cost, a.tau, lagrangian, temperature, action_box, config)
}

#[derive(Debug, Clone, PartialEq)]
struct EnvSlot {
    state: EnvState,
    rng: EnvRng,
    ep_return: f64,
    ep_cost: f64,
}

/// Accumulators for the current logging interval.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Interval {
    ep_return_sum: f64,
    ep_cost_sum: f64,
    episodes: u64,
    explore_calls: u64,
    unsafe_calls: u64,
    conflicts: u64,
    eta_sum: f64,
    updates: u64,
    loss_critic_reward: f64,
    loss_critic_cost: f64,
    loss_actor: f64,
    cost_ub_sum: f64,
}

impl Interval {
    const FIELDS: usize = 12;

    fn to_vec(self) -> Vec<f64> {
        vec![
            self.ep_return_sum,
            self.ep_cost_sum,
            self.episodes as f64,
            self.explore_calls as f64,
            self.unsafe_calls as f64,
            self.conflicts as f64,
            self.eta_sum,
            self.updates as f64,
            self.loss_critic_reward,
            self.loss_critic_cost,
            self.loss_actor,
            self.cost_ub_sum,
        ]
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::FIELDS {
            return Err(CoxqError::Checkpoint("bad interval accumulator".into()));
        }
        Ok(Self {
            ep_return_sum: v[0],
            ep_cost_sum: v[1],
            episodes: v[2] as u64,
            explore_calls: v[3] as u64,
            unsafe_calls: v[4] as u64,
            conflicts: v[5] as u64,
            eta_sum: v[6],
            updates: v[7] as u64,
            loss_critic_reward: v[8],
            loss_critic_cost: v[9],
            loss_actor: v[10],
            cost_ub_sum: v[11],
        })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    env: Box<dyn Cmdp>,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    pub trust_region: TrustRegion,
    slots: Vec<EnvSlot>,
    action_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    recent: VecDeque<f64>,
    recent_sum: f64,
    pub env_steps: u64,
    pub grad_steps: u64,
    interval: Interval,
    pub records: Vec<MetricsRecord>,
    pub last_eval: Option<EvalSummary>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = build_env(&config)?;
        let mut seeder = ChaCha8Rng::seed_from_u64(config.run.seed);
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeder.random());
        let learner = build_learner(&config, env.as_ref(), &mut init_rng)?;
        let buffer = ReplayBuffer::new(
            config.agent.buffer_size,
            env.obs_dim(),
            env.action_box().dim(),
            seeder.random(),
        )?;
        let action_rng = ChaCha8Rng::seed_from_u64(seeder.random());
        let update_rng = ChaCha8Rng::seed_from_u64(seeder.random());
        let slots = (0..config.agent.parallel_envs)
            .map(|_| {
                let mut rng = EnvRng::seed_from_u64(seeder.random());
                let state = env.reset(&mut rng);
                EnvSlot {
                    state,
                    rng,
                    ep_return: 0.0,
                    ep_cost: 0.0,
                }
            })
            .collect();
        let e = &config.exploration;
        let trust_region = TrustRegion::new(e.delta_init.unwrap_or(e.delta_max), e.delta_min, e.delta_max, e.lr_delta)?;
        Ok(Self {
            env,
            learner,
            buffer,
            trust_region,
            slots,
            action_rng,
            update_rng,
            recent: VecDeque::with_capacity(config.exploration.recent_window),
            recent_sum: 0.0,
            env_steps: 0,
            grad_steps: 0,
            interval: Interval::default(),
            records: Vec::new(),
            last_eval: None,
            started: Instant::now(),
            config,
        })
    }

    pub fn env(&self) -> &dyn Cmdp {
        self.env.as_ref()
    }

    /// Mean per-episode cost implied by the recent window.
    pub fn recent_episode_cost(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        self.recent_sum / self.recent.len() as f64 * self.env.horizon() as f64
    }

    fn push_recent(&mut self, cost: f64) {
        if self.recent.len() == self.config.exploration.recent_window {
            if let Some(old) = self.recent.pop_front() {
                self.recent_sum -= old;
            }
        }
        self.recent.push_back(cost);
        self.recent_sum += cost;
    }

    fn choose_action(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        let action_box = self.learner.action_box.clone();
        if self.env_steps < self.config.agent.initial_steps {
            return Ok(action_box
                .low
                .iter()
                .zip(&action_box.high)
                .map(|(lo, hi)| self.action_rng.random_range(*lo..=*hi))
                .collect());
        }
        let out = self.learner.policy.policy_forward(obs)?;
        let mu = if self.config.run.cox {
            let lambda = self.learner.lagrangian.lambda;
            let d = self.learner.lagrangian.d_q;
            let decision = match self.learner.exploration_gradients(obs, &out.mu) {
                Ok((grads, bounds)) => {
                    Some(explore(&out, &grads, lambda, d, bounds.q_c_mean, &self.trust_region, &action_box))
                }
                Err(e) => {
                    log::warn!("exploration gradients unavailable: {e}");
                    None
                }
            };
            self.interval.explore_calls += 1;
            match decision {
                Some(dec) => {
                    if !dec.in_safe_region {
                        self.interval.unsafe_calls += 1;
                        self.interval.conflicts += u64::from(dec.conflicted);
                    }
                    self.interval.eta_sum += dec.eta_star;
                    dec.mu_e
                }
                None => out.mu.clone(),
            }
        } else {
            out.mu.clone()
        };
        let shifted = GaussianPolicyOutput {
            mu,
            log_std: out.log_std,
        };
        Ok(sample_action(&shifted, &mut self.action_rng, &action_box).0)
    }

    /// Steps every parallel environment once, then runs the gradient updates.
    pub fn round(&mut self) -> Result<()> {
        for i in 0..self.slots.len() {
            let obs = self.env.observe(&self.slots[i].state);
            let action = self.choose_action(&obs)?;
            let slot = &mut self.slots[i];
            let step = self.env.step(&slot.state, &action, &mut slot.rng);
            let transition = Transition {
                state: obs,
                action,
                reward: step.reward,
                cost: step.cost,
                next_state: self.env.observe(&step.next_state),
                terminated: step.terminated,
                truncated: step.truncated,
                step_index: self.env_steps,
            };
            slot.ep_return += step.reward;
            slot.ep_cost += step.cost;
            if step.terminated || step.truncated {
                self.interval.ep_return_sum += slot.ep_return;
                self.interval.ep_cost_sum += slot.ep_cost;
                self.interval.episodes += 1;
                slot.ep_return = 0.0;
                slot.ep_cost = 0.0;
                slot.state = self.env.reset(&mut slot.rng);
            } else {
                slot.state = step.next_state;
            }
            self.buffer.push(&transition)?;
            self.push_recent(step.cost);
            self.env_steps += 1;
            if self.config.run.cox && self.env_steps > self.config.agent.initial_steps {
                self.trust_region = self
                    .trust_region
                    .update_delta(self.recent_episode_cost(), self.config.constraint.episode_cost_limit);
            }
        }
        if self.env_steps > self.config.agent.initial_steps && self.buffer.len() >= self.config.agent.batch_size {
            for _ in 0..self.config.agent.gradient_steps {
                self.gradient_step()?;
            }
        }
        Ok(())
    }

    fn gradient_step(&mut self) -> Result<()> {
        let batch = self.buffer.sample(self.config.agent.batch_size)?;
        let stats = self.learner.update(&batch, &mut self.update_rng)?;
        self.grad_steps += 1;
        if self.grad_steps % self.config.agent.target_update_interval == 0 {
            self.learner.polyak_update()?;
        }
        self.interval.updates += 1;
        self.interval.loss_critic_reward += stats.critic.reward;
        self.interval.loss_critic_cost += stats.critic.cost;
        self.interval.loss_actor += stats.actor.loss;
        self.interval.cost_ub_sum += stats.actor.mean_cost_ub;
        Ok(())
    }

    fn eval_seed(&self) -> u64 {
        self.config.run.seed.wrapping_mul(1_000_003).wrapping_add(17)
    }

    /// Deterministic evaluation and, if configured, the cost-bias probe.
    pub fn evaluate(&self) -> Result<(EvalSummary, Option<super::evaluate::BiasReport>)> {
        let run = &self.config.run;
        let n = run.eval_episodes.max(usize::from(run.bias_states > 0));
        let (summary, trajectories) = evaluate_policy(
            self.env.as_ref(),
            &self.learner.policy,
            n,
            self.eval_seed(),
            self.config.constraint.episode_cost_limit,
        );
        let bias = if run.bias_states > 0 {
            let states = spread_states(&trajectories[0], run.bias_states);
            let settings = OracleSettings {
                n_rollouts: run.bias_rollouts,
                gamma: self.config.agent.gamma,
                horizon: run.bias_horizon,
                n_quantiles: self.config.critic.n_quantiles,
            };
            let seed = self.eval_seed() ^ self.env_steps;
            Some(cost_bias(
                self.env.as_ref(),
                &self.learner.policy,
                &self.learner.cost,
                &states,
                settings,
                seed,
            )?)
        } else {
            None
        };
        Ok((summary, bias))
    }

    fn log_record(&mut self, with_eval: bool) -> Result<()> {
        let iv = std::mem::take(&mut self.interval);
        let per_episode = |sum: f64| (iv.episodes > 0).then(|| sum / iv.episodes as f64);
        let per_update = |sum: f64| if iv.updates > 0 { sum / iv.updates as f64 } else { 0.0 };
        let mut rec = MetricsRecord {
            step: self.env_steps,
            episode_return: per_episode(iv.ep_return_sum),
            episode_cost: per_episode(iv.ep_cost_sum),
            episodes: iv.episodes,
            lambda: self.learner.lagrangian.lambda,
            delta: self.trust_region.delta,
            alpha_ent: self.learner.temperature.alpha(),
            conflict_ratio: if iv.unsafe_calls > 0 {
                iv.conflicts as f64 / iv.unsafe_calls as f64
            } else {
                0.0
            },
            eta_star_mean: if iv.explore_calls > 0 {
                iv.eta_sum / iv.explore_calls as f64
            } else {
                0.0
            },
            unsafe_ratio: if iv.explore_calls > 0 {
                iv.unsafe_calls as f64 / iv.explore_calls as f64
            } else {
                0.0
            },
            batch_cost_ub: per_update(iv.cost_ub_sum),
            losses: Losses {
                critic_reward: per_update(iv.loss_critic_reward),
                critic_cost: per_update(iv.loss_critic_cost),
                actor: per_update(iv.loss_actor),
            },
            wall_time: self.started.elapsed().as_secs_f64(),
            ..Default::default()
        };
        if with_eval {
            let (summary, bias) = self.evaluate()?;
            rec.eval_return = Some(summary.mean_return);
            rec.eval_cost = Some(summary.mean_cost);
            if let Some(b) = bias {
                rec.cost_bias = Some(b.signed);
                rec.cost_bias_abs = Some(b.abs);
                rec.oracle_cost = Some(b.oracle_mean);
            }
            self.last_eval = Some(summary);
        }
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        log::info!(
            "step {} return {} cost {} eval {}/{} bias {} lambda {:.4} delta {:.4} conflicts {:.3}",
            rec.step,
            show(rec.episode_return),
            show(rec.episode_cost),
            show(rec.eval_return),
            show(rec.eval_cost),
            show(rec.cost_bias),
            rec.lambda,
            rec.delta,
            rec.conflict_ratio
        );
        self.records.push(rec);
        Ok(())
    }

    /// Runs rounds until `target` environment steps, logging on the way.
    /// Metrics are flushed to `out_dir` at every record when given.
    pub fn run_until(&mut self, target: u64, out_dir: Option<&Path>) -> Result<()> {
        let run = self.config.run.clone();
        while self.env_steps < target {
            let before = self.env_steps;
            if let Err(e) = self.round() {
                if let (CoxqError::NumericDivergence(_), Some(dir)) = (&e, out_dir) {
                    self.save(&dir.join("checkpoint.bin"))?;
                    flush_metrics(dir, &self.records)?;
                }
                return Err(e);
            }
            let now = self.env_steps;
            let crossed = |interval: u64| before / interval != now / interval;
            if crossed(run.log_interval) || crossed(run.eval_interval) {
                self.log_record(crossed(run.eval_interval))?;
                if let Some(dir) = out_dir {
                    flush_metrics(dir, &self.records)?;
                }
            }
            if run.checkpoint_interval > 0 && crossed(run.checkpoint_interval) {
                if let Some(dir) = out_dir {
                    self.save(&dir.join("checkpoint.bin"))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("config", self.config.to_toml_string().as_bytes());
        put_mlp(&mut ck, "policy", &self.learner.policy.net);
        put_adam(&mut ck, "opt.policy", &self.learner.policy_opt);
        for (name, ens, opts, targets) in [
            ("reward", &self.learner.reward, &self.learner.reward_opt, &self.learner.targets.reward),
            ("cost", &self.learner.cost, &self.learner.cost_opt, &self.learner.targets.cost),
        ] {
            for (n, critic) in ens.critics.iter().enumerate() {
                put_mlp(&mut ck, &format!("{name}.{n}"), critic);
                put_adam(&mut ck, &format!("opt.{name}.{n}"), &opts[n]);
                put_mlp(&mut ck, &format!("target.{name}.{n}"), &targets[n]);
            }
        }
        ck.put_scalar("temperature.log_alpha", self.learner.temperature.log_alpha_ent);
        put_adam(&mut ck, "opt.temperature", &self.learner.temperature.opt);
        ck.put_scalar("lagrangian.lambda", self.learner.lagrangian.lambda);
        ck.put_scalar("trust_region.delta", self.trust_region.delta);

        let b = &self.buffer;
        ck.put_f64("replay.obs", &b.obs);
        ck.put_f64("replay.actions", &b.actions);
        ck.put_f64("replay.rewards", &b.rewards);
        ck.put_f64("replay.costs", &b.costs);
        ck.put_f64("replay.next_obs", &b.next_obs);
        ck.put_bytes("replay.flags", &b.flags);
        ck.put_u64("replay.step_index", &b.step_index);
        ck.put_u64("replay.cursor", &[b.cursor as u64, b.inserted]);
        ck.put_rng("replay.rng", &b.rng);

        for (i, slot) in self.slots.iter().enumerate() {
            ck.put_f64(format!("env.{i}.state"), &slot.state.vars);
            ck.put_u64(format!("env.{i}.t"), &[slot.state.t as u64]);
            ck.put_f64(format!("env.{i}.episode"), &[slot.ep_return, slot.ep_cost]);
            ck.put_rng(&format!("env.{i}.rng"), &slot.rng);
        }
        ck.put_rng("rng.action", &self.action_rng);
        ck.put_rng("rng.update", &self.update_rng);
        let recent: Vec<f64> = self.recent.iter().copied().collect();
        ck.put_f64("recent.costs", &recent);
        ck.put_scalar("recent.sum", self.recent_sum);
        ck.put_u64("counters", &[self.env_steps, self.grad_steps]);
        ck.put_f64("interval", &self.interval.to_vec());
        ck.put_bytes("metrics", to_jsonl(&self.records).as_bytes());
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_from_checkpoint(ck)?;
        let mut tr = Trainer::new(config)?;
        let ckerr = |m: String| CoxqError::Checkpoint(m);
        tr.learner.policy = GaussianPolicy::from_net(take_mlp(ck, "policy", &tr.learner.policy.net)?)?;
        take_adam(ck, "opt.policy", &mut tr.learner.policy_opt)?;
        for name in ["reward", "cost"] {
            let (ens, opts, targets) = if name == "reward" {
                (&mut tr.learner.reward, &mut tr.learner.reward_opt, &mut tr.learner.targets.reward)
            } else {
                (&mut tr.learner.cost, &mut tr.learner.cost_opt, &mut tr.learner.targets.cost)
            };
            for n in 0..ens.critics.len() {
                ens.critics[n] = take_mlp(ck, &format!("{name}.{n}"), &ens.critics[n])?;
                take_adam(ck, &format!("opt.{name}.{n}"), &mut opts[n])?;
                targets[n] = take_mlp(ck, &format!("target.{name}.{n}"), &targets[n])?;
            }
        }
        tr.learner.temperature.log_alpha_ent = ck.scalar("temperature.log_alpha")?;
        take_adam(ck, "opt.temperature", &mut tr.learner.temperature.opt)?;
        tr.learner.lagrangian.lambda = ck.scalar("lagrangian.lambda")?;
        tr.trust_region.delta = ck.scalar("trust_region.delta")?;

        let b = &mut tr.buffer;
        b.obs = ck.f64s("replay.obs")?.to_vec();
        b.actions = ck.f64s("replay.actions")?.to_vec();
        b.rewards = ck.f64s("replay.rewards")?.to_vec();
        b.costs = ck.f64s("replay.costs")?.to_vec();
        b.next_obs = ck.f64s("replay.next_obs")?.to_vec();
        b.flags = ck.bytes("replay.flags")?.to_vec();
        b.step_index = ck.u64s("replay.step_index")?.to_vec();
        let n = b.rewards.len();
        if b.obs.len() != n * b.obs_dim()
            || b.next_obs.len() != n * b.obs_dim()
            || b.actions.len() != n * b.act_dim()
            || b.costs.len() != n
            || b.flags.len() != n
            || b.step_index.len() != n
            || n > b.capacity()
        {
            return Err(ckerr("replay buffer columns are inconsistent".into()));
        }
        let cursor = ck.u64s("replay.cursor")?;
        if cursor.len() != 2 {
            return Err(ckerr("bad replay cursor".into()));
        }
        b.cursor = cursor[0] as usize;
        b.inserted = cursor[1];
        b.rng = ck.rng("replay.rng")?;

        for (i, slot) in tr.slots.iter_mut().enumerate() {
            slot.state = EnvState {
                vars: ck.f64s(&format!("env.{i}.state"))?.to_vec(),
                t: ck.u64_scalar(&format!("env.{i}.t"))? as usize,
            };
            let ep = ck.f64s(&format!("env.{i}.episode"))?;
            if ep.len() != 2 {
                return Err(ckerr(format!("bad episode accumulators for env {i}")));
            }
            slot.ep_return = ep[0];
            slot.ep_cost = ep[1];
            slot.rng = ck.rng(&format!("env.{i}.rng"))?;
        }
        tr.action_rng = ck.rng("rng.action")?;
        tr.update_rng = ck.rng("rng.update")?;
        tr.recent = ck.f64s("recent.costs")?.iter().copied().collect();
        tr.recent_sum = ck.scalar("recent.sum")?;
        let counters = ck.u64s("counters")?;
        if counters.len() != 2 {
            return Err(ckerr("bad counters".into()));
        }
        tr.env_steps = counters[0];
        tr.grad_steps = counters[1];
        tr.interval = Interval::from_slice(ck.f64s("interval")?)?;
        let metrics = std::str::from_utf8(ck.bytes("metrics")?).map_err(|_| ckerr("metrics blob is not UTF-8".into()))?;
        tr.records = parse_jsonl(metrics)?;
        Ok(tr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let text = std::str::from_utf8(ck.bytes("config")?)
        .map_err(|_| CoxqError::Checkpoint("config blob is not UTF-8".into()))?;
    TrainConfig::from_toml_str(text)
}

/// Rebuilds the policy stored in a checkpoint, checking it against the
/// environment's dimensions.
pub fn policy_from_checkpoint(ck: &Checkpoint, env: &dyn Cmdp) -> Result<GaussianPolicy> {
    let mut layers = Vec::new();
    let mut i = 0;
    while ck.contains(&format!("policy.l{i}.w")) {
        i += 1;
    }
    if i == 0 {
        return Err(CoxqError::Checkpoint("checkpoint holds no policy network".into()));
    }
    for l in 0..i {
        let activation = if l + 1 == i { Activation::Linear } else { Activation::Relu };
        layers.push(Dense {
            w: ck.matrix(&format!("policy.l{l}.w"))?,
            b: ck.vector(&format!("policy.l{l}.b"))?,
            activation,
        });
    }
    let policy = GaussianPolicy::from_net(Mlp::from_layers(layers)?)?;
    if policy.obs_dim() != env.obs_dim() || policy.act_dim() != env.action_box().dim() {
        return Err(CoxqError::Checkpoint(format!(
            "policy maps {} -> {} but the environment needs {} -> {}",
            policy.obs_dim(),
            policy.act_dim(),
            env.obs_dim(),
            env.action_box().dim()
        )));
    }
    Ok(policy)
}

fn put_mlp(ck: &mut Checkpoint, prefix: &str, net: &Mlp) {
    for (i, layer) in net.layers().iter().enumerate() {
        ck.put_matrix(format!("{prefix}.l{i}.w"), &layer.w);
        ck.put_f64(format!("{prefix}.l{i}.b"), layer.b.as_slice().expect("standard layout"));
    }
}

fn take_mlp(ck: &Checkpoint, prefix: &str, like: &Mlp) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(like.layers().len());
    for (i, l) in like.layers().iter().enumerate() {
        let w = ck.matrix(&format!("{prefix}.l{i}.w"))?;
        let b = ck.vector(&format!("{prefix}.l{i}.b"))?;
        if w.dim() != l.w.dim() || b.len() != l.b.len() {
            return Err(CoxqError::Checkpoint(format!(
                "layer {prefix}.l{i} has shape {:?} but the config expects {:?}",
                w.dim(),
                l.w.dim()
            )));
        }
        layers.push(Dense {
            w,
            b,
            activation: l.activation,
        });
    }
    Mlp::from_layers(layers)
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, st: &AdamState) {
    ck.put_u64(format!("{prefix}.counters"), &[st.step, st.skipped]);
    for (k, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
        ck.put_f64(format!("{prefix}.m{k}"), m);
        ck.put_f64(format!("{prefix}.v{k}"), v);
    }
}

fn take_adam(ck: &Checkpoint, prefix: &str, st: &mut AdamState) -> Result<()> {
    let counters = ck.u64s(&format!("{prefix}.counters"))?;
    if counters.len() != 2 {
        return Err(CoxqError::Checkpoint(format!("bad optimizer counters for {prefix}")));
    }
    st.step = counters[0];
    st.skipped = counters[1];
    for k in 0..st.m.len() {
        let m = ck.f64s(&format!("{prefix}.m{k}"))?;
        let v = ck.f64s(&format!("{prefix}.v{k}"))?;
        if m.len() != st.m[k].len() || v.len() != st.v[k].len() {
            return Err(CoxqError::Checkpoint(format!("optimizer moment shape mismatch in {prefix}")));
        }
        st.m[k] = m.to_vec();
        st.v[k] = v.to_vec();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_eval: Option<EvalSummary>,
}

/// Full run: echoes the resolved config, trains, flushes metrics and writes
/// the final checkpoint into `config.run.out_dir`.
pub fn run_train(config: TrainConfig) -> Result<TrainOutcome> {
    let out_dir = config.run.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    super::metrics::write_atomic(&out_dir.join("config.toml"), config.to_toml_string().as_bytes())?;
    let total = config.run.total_steps;
    let mut trainer = Trainer::new(config)?;
    trainer.run_until(total, Some(&out_dir))?;
    flush_metrics(&out_dir, &trainer.records)?;
    let checkpoint = out_dir.join("checkpoint.bin");
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        out_dir,
        checkpoint,
        records: trainer.records,
        final_eval: trainer.last_eval,
    })
}

/// Evaluates the mean policy stored in a checkpoint.
pub fn run_eval(checkpoint: &Path, n_episodes: usize, seed: u64) -> Result<EvalSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = config_from_checkpoint(&ck)?;
    let env = build_env(&config)?;
    let policy = policy_from_checkpoint(&ck, env.as_ref())?;
    let (summary, _) = evaluate_policy(env.as_ref(), &policy, n_episodes, seed, config.constraint.episode_cost_limit);
    Ok(summary)
}
