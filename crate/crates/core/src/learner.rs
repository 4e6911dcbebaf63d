//! Off-policy update engine: truncated quantile critic updates, the
//! augmented-Lagrangian actor update, temperature tuning, dual ascent on the
//! multiplier and target-network tracking.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{
    apply_gradient_step, critic_action_gradients, gaussian_log_prob, ActionBox, AdamState, GaussianPolicy,
    GradientTriple, Mlp, MlpGrads, QuantileEnsemble,
};
use crate::error::{check_len, CoxqError, Result};
use crate::quantile_critics::{
    band_batch, bellman_target, quantile_huber_row, tau_levels, truncate_pool, BandSpec, BoundConfig, CriticBounds,
    Objective, TruncationSpec,
};

/// Per-step discounted cost cap equivalent to an undiscounted episode limit
/// spread evenly over `horizon` steps.
pub fn convert_limit(d_episode: f64, horizon: usize, gamma: f64) -> Result<f64> {
    if horizon == 0 {
        return Err(CoxqError::invalid("horizon must be >= 1"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoxqError::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let t = horizon as f64;
    // 1 - γ^T via expm1 keeps precision when γ^T is close to 1.
    let one_minus_pow = -(t * gamma.ln()).exp_m1();
    Ok(d_episode * one_minus_pow / (t * (1.0 - gamma)))
}

/// Multiplier state for the constrained objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub lr_lambda: f64,
    /// Convexification coefficient of the augmented term.
    pub alm_c: f64,
    /// Converted per-step cap on the cost value.
    pub d_q: f64,
    pub d_episode: f64,
}

impl LagrangianState {
    pub fn new(lambda: f64, lr_lambda: f64, alm_c: f64, d_episode: f64, horizon: usize, gamma: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(CoxqError::invalid("initial multiplier must be >= 0"));
        }
        if !(alm_c > 0.0) {
            return Err(CoxqError::invalid("ALM coefficient must be > 0"));
        }
        if !(d_episode >= 0.0) {
            return Err(CoxqError::invalid("episode cost limit must be >= 0"));
        }
        Ok(Self {
            lambda,
            lr_lambda,
            alm_c,
            d_q: convert_limit(d_episode, horizon, gamma)?,
            d_episode,
        })
    }

    /// Projected dual ascent on the batch-mean conservative cost estimate.
    pub fn lambda_update(&self, batch_mean_cost_ub: f64) -> LagrangianState {
        let next = self.lambda + self.lr_lambda * (batch_mean_cost_ub - self.d_q);
        LagrangianState {
            lambda: if next.is_finite() { next.max(0.0) } else { self.lambda },
            ..*self
        }
    }

    pub fn penalty(&self, q_c_ub: f64) -> (f64, f64) {
        alm_penalty(q_c_ub, self.lambda, self.alm_c, self.d_q)
    }
}

/// Augmented-Lagrangian penalty on a cost estimate and its derivative.
///
/// Active branch (`λ + c (q - d) >= 0`): `λ (q - d) + c/2 (q - d)²`.
/// Inactive branch: the constant `-λ² / (2c)`, which contributes no gradient
/// and joins the active branch with matching value and slope.
pub fn alm_penalty(q: f64, lambda: f64, c: f64, d: f64) -> (f64, f64) {
    let gap = q - d;
    if lambda + c * gap >= 0.0 {
        (lambda * gap + 0.5 * c * gap * gap, lambda + c * gap)
    } else {
        (-lambda * lambda / (2.0 * c), 0.0)
    }
}

/// Entropy temperature, tuned on its log.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureState {
    pub log_alpha_ent: f64,
    pub target_entropy: f64,
    pub lr: f64,
    pub auto_tune: bool,
    pub opt: AdamState,
}

impl TemperatureState {
    pub fn new(initial_alpha: f64, target_entropy: f64, lr: f64, auto_tune: bool) -> Result<Self> {
        if !(initial_alpha > 0.0 && initial_alpha.is_finite()) {
            return Err(CoxqError::invalid("initial temperature must be > 0"));
        }
        Ok(Self {
            log_alpha_ent: initial_alpha.ln(),
            target_entropy,
            lr,
            auto_tune,
            opt: AdamState::scalar(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha_ent.exp()
    }

    /// Gradient of `α (-log π - H̄)` with respect to `log α`, batch-averaged.
    pub fn gradient(&self, batch_log_probs: &[f64]) -> f64 {
        if batch_log_probs.is_empty() {
            return 0.0;
        }
        let mean_neg_logp = -batch_log_probs.iter().sum::<f64>() / batch_log_probs.len() as f64;
        self.alpha() * (mean_neg_logp - self.target_entropy)
    }

    pub fn temperature_update(&self, batch_log_probs: &[f64]) -> TemperatureState {
        let mut next = self.clone();
        if !self.auto_tune {
            return next;
        }
        let g = [self.gradient(batch_log_probs)];
        let mut p = [next.log_alpha_ent];
        next.opt.step_tensors(vec![&mut p], vec![&g], self.lr);
        next.log_alpha_ent = p[0];
        next
    }
}

/// Slowly tracking copies of both critic ensembles.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetworks {
    pub reward: Vec<Mlp>,
    pub cost: Vec<Mlp>,
    pub tau: f64,
}

impl TargetNetworks {
    pub fn new(reward: &QuantileEnsemble, cost: &QuantileEnsemble, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(CoxqError::invalid(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(Self {
            reward: reward.critics.clone(),
            cost: cost.critics.clone(),
            tau,
        })
    }

    pub fn polyak_update(&mut self, reward: &QuantileEnsemble, cost: &QuantileEnsemble) -> Result<()> {
        self.polyak_with(reward, cost, self.tau)
    }

    pub fn polyak_with(&mut self, reward: &QuantileEnsemble, cost: &QuantileEnsemble, tau: f64) -> Result<()> {
        check_len(self.reward.len(), reward.critics.len())?;
        check_len(self.cost.len(), cost.critics.len())?;
        for (t, l) in self.reward.iter_mut().zip(&reward.critics) {
            t.polyak_from(l, tau)?;
        }
        for (t, l) in self.cost.iter_mut().zip(&cost.critics) {
            t.polyak_from(l, tau)?;
        }
        Ok(())
    }
}

/// A minibatch of transitions, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub next_obs: Array2<f64>,
    /// True termination only; horizon truncation still bootstraps.
    pub terminated: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.len();
        if b == 0 {
            return Err(CoxqError::invalid("empty batch"));
        }
        check_len(b, self.obs.nrows())?;
        check_len(b, self.actions.nrows())?;
        check_len(b, self.costs.len())?;
        check_len(b, self.next_obs.nrows())?;
        check_len(b, self.terminated.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub huber_kappa: f64,
    pub truncation: TruncationSpec,
    pub bounds: BoundConfig,
    /// Include `-α log π` in reward targets and the actor objective.
    pub entropy_bonus: bool,
    /// Weight of the quadratic pull on a policy mean outside the action box.
    pub mean_box_weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticLosses {
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub loss: f64,
    pub mean_log_prob: f64,
    pub mean_reward_q: f64,
    pub mean_cost_ub: f64,
    pub penalty: f64,
    /// False when the step was skipped for a non-finite gradient.
    pub applied: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic: CriticLosses,
    pub actor: ActorStats,
    pub alpha_ent: f64,
    pub lambda: f64,
}

/// Value of the actor objective (to be minimized) and its policy gradient for
/// a fixed reparameterization noise draw.
#[derive(Debug, Clone)]
pub struct ActorObjective {
    pub stats: ActorStats,
    pub grads: MlpGrads,
}

/// All trainable state of the agent plus the update rules.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub reward: QuantileEnsemble,
    pub cost: QuantileEnsemble,
    pub targets: TargetNetworks,
    pub policy_opt: AdamState,
    pub reward_opt: Vec<AdamState>,
    pub cost_opt: Vec<AdamState>,
    pub lagrangian: LagrangianState,
    pub temperature: TemperatureState,
    pub action_box: ActionBox,
    pub config: LearnerConfig,
}

impl Learner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        policy: GaussianPolicy,
        reward: QuantileEnsemble,
        cost: QuantileEnsemble,
        tau: f64,
        lagrangian: LagrangianState,
        temperature: TemperatureState,
        action_box: ActionBox,
        config: LearnerConfig,
    ) -> Result<Self> {
        check_len(policy.act_dim(), action_box.dim())?;
        check_len(policy.act_dim(), reward.act_dim())?;
        check_len(policy.act_dim(), cost.act_dim())?;
        check_len(policy.obs_dim(), reward.obs_dim())?;
        check_len(policy.obs_dim(), cost.obs_dim())?;
        config.bounds.validate(cost.n_quantiles())?;
        config.truncation.validate(reward.n_critics() * reward.n_quantiles())?;
        config.truncation.validate(cost.n_critics() * cost.n_quantiles())?;
        if !(config.huber_kappa > 0.0) {
            return Err(CoxqError::invalid("huber kappa must be > 0"));
        }
        if !(config.gamma >= 0.0 && config.gamma < 1.0) {
            return Err(CoxqError::invalid("gamma must lie in [0, 1)"));
        }
        let targets = TargetNetworks::new(&reward, &cost, tau)?;
        let policy_opt = AdamState::new(&policy.net);
        let reward_opt = reward.critics.iter().map(AdamState::new).collect();
        let cost_opt = cost.critics.iter().map(AdamState::new).collect();
        Ok(Self {
            policy,
            reward,
            cost,
            targets,
            policy_opt,
            reward_opt,
            cost_opt,
            lagrangian,
            temperature,
            action_box,
            config,
        })
    }

    fn entropy_alpha(&self) -> f64 {
        if self.config.entropy_bonus {
            self.temperature.alpha()
        } else {
            0.0
        }
    }

    /// Reparameterized actions `clip(μ + σ ξ)`, the unclipped log-densities and
    /// the mask of coordinates strictly inside the box.
    fn reparam(&self, mu: &Array2<f64>, log_std: &Array2<f64>, xi: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Array2<bool>) {
        let raw = mu + &(log_std.mapv(f64::exp) * xi);
        let mut actions = raw.clone();
        let mut inside = Array2::from_elem(raw.raw_dim(), true);
        for (b, mut row) in actions.rows_mut().into_iter().enumerate() {
            for (j, a) in row.iter_mut().enumerate() {
                let (lo, hi) = (self.action_box.low[j], self.action_box.high[j]);
                if !(lo < *a && *a < hi) {
                    inside[[b, j]] = false;
                    *a = a.clamp(lo, hi);
                }
            }
        }
        let log_probs = (0..raw.nrows())
            .map(|b| {
                gaussian_log_prob(
                    raw.row(b).as_slice().expect("row"),
                    mu.row(b).as_slice().expect("row"),
                    log_std.row(b).as_slice().expect("row"),
                )
            })
            .collect();
        (actions, log_probs, inside)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, self.policy.act_dim()), || StandardNormal.sample(rng))
    }

    /// Pooled, truncated Bellman targets for every transition of the batch.
    pub fn critic_targets(&self, batch: &Batch, xi: &Array2<f64>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        batch.validate()?;
        let pb = self.policy.forward_batch(batch.next_obs.view());
        let (next_actions, log_probs, _) = self.reparam(&pb.mu, &pb.log_std, xi);
        let x = QuantileEnsemble::join_inputs(batch.next_obs.view(), next_actions.view());
        let r_next: Vec<Array2<f64>> = self.targets.reward.iter().map(|c| c.forward(x.view())).collect();
        let c_next: Vec<Array2<f64>> = self.targets.cost.iter().map(|c| c.forward(x.view())).collect();
        let alpha = self.entropy_alpha();
        let gamma = self.config.gamma;
        let spec = self.config.truncation;
        let pool = |outs: &[Array2<f64>], b: usize| -> Vec<f64> {
            outs.iter().flat_map(|o| o.row(b).to_vec()).collect()
        };
        let mut reward_targets = Vec::with_capacity(batch.len());
        let mut cost_targets = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let done = batch.terminated[b];
            let mut zr = truncate_pool(pool(&r_next, b), spec, Objective::Reward);
            for z in zr.iter_mut() {
                *z -= alpha * log_probs[b];
            }
            let zc = truncate_pool(pool(&c_next, b), spec, Objective::Cost);
            reward_targets.push(bellman_target(batch.rewards[b], done, gamma, &zr));
            cost_targets.push(bellman_target(batch.costs[b], done, gamma, &zc));
        }
        if reward_targets.iter().chain(&cost_targets).flatten().any(|v| !v.is_finite()) {
            return Err(CoxqError::NumericDivergence("non-finite critic target".into()));
        }
        Ok((reward_targets, cost_targets))
    }

    /// One quantile-regression step per objective ensemble.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<CriticLosses> {
        let xi = self.sample_noise(batch.len(), rng);
        let (reward_targets, cost_targets) = self.critic_targets(batch, &xi)?;
        let x = QuantileEnsemble::join_inputs(batch.obs.view(), batch.actions.view());
        let kappa = self.config.huber_kappa;
        let lr = self.config.lr_critic;
        let reward = fit_ensemble(&mut self.reward, &mut self.reward_opt, x.view(), &reward_targets, kappa, lr);
        let cost = fit_ensemble(&mut self.cost, &mut self.cost_opt, x.view(), &cost_targets, kappa, lr);
        Ok(CriticLosses { reward, cost })
    }

    /// Actor objective `E[α log π - Q_r^mean] + P(E[Q_c^UB]) + box pull` and its
    /// gradient for a given noise draw. Does not modify any state.
    pub fn actor_objective(&self, obs: ArrayView2<'_, f64>, xi: &Array2<f64>) -> Result<ActorObjective> {
        let batch = obs.nrows();
        if batch == 0 {
            return Err(CoxqError::invalid("empty batch"));
        }
        let bf = batch as f64;
        let pb = self.policy.forward_batch(obs);
        let (actions, log_probs, inside) = self.reparam(&pb.mu, &pb.log_std, xi);
        let x = QuantileEnsemble::join_inputs(obs, actions.view());
        let rb = self.reward.forward_cached(x.view());
        let cb = self.cost.forward_cached(x.view());
        let (q_r, mut g_r) = band_batch(&rb.outputs, BandSpec::mean());
        let (q_c, mut g_c) = band_batch(&cb.outputs, self.config.bounds.cost_ub());
        let mean_q_r = q_r.iter().sum::<f64>() / bf;
        let mean_q_c = q_c.iter().sum::<f64>() / bf;
        let mean_logp = log_probs.iter().sum::<f64>() / bf;
        let (penalty, dpenalty) = self.lagrangian.penalty(mean_q_c);
        let alpha = self.entropy_alpha();

        let box_excess = pb.mu.clone() - &clip_rows(&pb.mu, &self.action_box);
        let w = self.config.mean_box_weight;
        let box_term = w * box_excess.iter().map(|e| e * e).sum::<f64>() / bf;
        let loss = alpha * mean_logp - mean_q_r + penalty + box_term;

        for g in g_r.iter_mut() {
            *g *= -1.0 / bf;
        }
        for g in g_c.iter_mut() {
            *g *= dpenalty / bf;
        }
        let act = self.policy.act_dim();
        let obs_dim = self.policy.obs_dim();
        let (_, in_r) = self.reward.backward(&rb, g_r);
        let mut d_action = in_r.slice(s![.., obs_dim..]).to_owned();
        if dpenalty != 0.0 {
            let (_, in_c) = self.cost.backward(&cb, g_c);
            d_action += &in_c.slice(s![.., obs_dim..]);
        }
        ndarray::Zip::from(&mut d_action).and(&inside).for_each(|g, &ins| {
            if !ins {
                *g = 0.0;
            }
        });
        let std = pb.log_std.mapv(f64::exp);
        let d_mu = &d_action + &(box_excess * (2.0 * w / bf));
        let d_log_std = &d_action * &std * xi - alpha / bf;
        debug_assert_eq!(d_mu.ncols(), act);
        let grads = self.policy.backward(&pb, &d_mu, &d_log_std);
        Ok(ActorObjective {
            stats: ActorStats {
                loss,
                mean_log_prob: mean_logp,
                mean_reward_q: mean_q_r,
                mean_cost_ub: mean_q_c,
                penalty,
                applied: false,
            },
            grads,
        })
    }

    pub fn actor_update<R: Rng + ?Sized>(&mut self, obs: ArrayView2<'_, f64>, rng: &mut R) -> Result<ActorStats> {
        let xi = self.sample_noise(obs.nrows(), rng);
        let obj = self.actor_objective(obs, &xi)?;
        let mut stats = obj.stats;
        if !stats.loss.is_finite() {
            log::warn!("skipping actor step with non-finite loss");
            self.policy_opt.skipped += 1;
            return Ok(stats);
        }
        stats.applied = apply_gradient_step(&mut self.policy.net, &obj.grads, &mut self.policy_opt, self.config.lr_actor);
        Ok(stats)
    }

    /// Critic step, actor step, temperature step and dual ascent, in that order.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
        let critic = self.critic_update(batch, rng)?;
        let actor = self.actor_update(batch.obs.view(), rng)?;
        if actor.mean_log_prob.is_finite() {
            self.temperature = self.temperature.temperature_update(&[actor.mean_log_prob]);
        }
        if actor.mean_cost_ub.is_finite() {
            self.lagrangian = self.lagrangian.lambda_update(actor.mean_cost_ub);
        }
        if !(self.policy.net.is_finite()
            && self.reward.critics.iter().all(Mlp::is_finite)
            && self.cost.critics.iter().all(Mlp::is_finite))
        {
            return Err(CoxqError::NumericDivergence("network parameters became non-finite".into()));
        }
        Ok(UpdateStats {
            critic,
            actor,
            alpha_ent: self.temperature.alpha(),
            lambda: self.lagrangian.lambda,
        })
    }

    pub fn polyak_update(&mut self) -> Result<()> {
        self.targets.polyak_update(&self.reward, &self.cost)
    }

    /// Exploration gradients and bounds at `a`, always from the live critics.
    pub fn exploration_gradients(&self, state: &[f64], at_action: &[f64]) -> Result<(GradientTriple, CriticBounds)> {
        critic_action_gradients(&self.reward, &self.cost, state, &self.config.bounds, at_action)
    }
}

fn clip_rows(x: &Array2<f64>, action_box: &ActionBox) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        action_box.clip(row.as_slice_mut().expect("row"));
    }
    out
}

/// Mean quantile-Huber loss of every critic against shared per-sample target
/// lists, and the parameter gradients of that loss.
pub fn critic_loss_and_grads(
    ens: &QuantileEnsemble,
    x: ArrayView2<'_, f64>,
    targets: &[Vec<f64>],
    kappa: f64,
) -> (f64, Vec<MlpGrads>) {
    let m = ens.n_quantiles();
    let n = ens.n_critics();
    let tau = tau_levels(m);
    let batch = ens.forward_cached(x);
    let b_count = targets.len();
    let mut total = 0.0;
    let mut grad_outputs = Vec::with_capacity(n);
    let mut row_grad = vec![0.0; m];
    for out in &batch.outputs {
        let mut grad = Array2::zeros((b_count, m));
        for (b, t) in targets.iter().enumerate() {
            let scale = 1.0 / (b_count * n * m * t.len()) as f64;
            row_grad.iter_mut().for_each(|g| *g = 0.0);
            let pred = out.row(b);
            let loss = quantile_huber_row(pred.as_slice().expect("row"), &tau, t, kappa, &mut row_grad);
            total += loss * scale;
            for (g, rg) in grad.row_mut(b).iter_mut().zip(&row_grad) {
                *g = rg * scale;
            }
        }
        grad_outputs.push(grad);
    }
    let (grads, _) = ens.backward(&batch, grad_outputs);
    (total, grads)
}

/// One optimizer step of every critic on its quantile-Huber loss. Returns the loss.
fn fit_ensemble(
    ens: &mut QuantileEnsemble,
    opts: &mut [AdamState],
    x: ArrayView2<'_, f64>,
    targets: &[Vec<f64>],
    kappa: f64,
    lr: f64,
) -> f64 {
    let (loss, grads) = critic_loss_and_grads(ens, x, targets, kappa);
    for ((critic, g), opt) in ens.critics.iter_mut().zip(&grads).zip(opts.iter_mut()) {
        apply_gradient_step(critic, g, opt, lr);
    }
    loss
}
