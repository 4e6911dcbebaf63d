//! Small constrained environments with known structure, and ground-truth
//! oracles (Monte-Carlo rollouts and a constrained dynamic program).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::ActionBox;
use crate::error::{check_len, CoxqError, Result};
use crate::quantile_critics::tau_levels;

/// Every environment and oracle draws from this generator so runs replay exactly.
pub type EnvRng = ChaCha8Rng;

/// Raw simulator state plus the elapsed step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub vars: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpStep {
    pub next_state: EnvState,
    pub reward: f64,
    pub cost: f64,
    pub terminated: bool,
    /// Horizon reached without termination.
    pub truncated: bool,
}

pub trait Cmdp {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_box(&self) -> ActionBox;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut EnvRng) -> EnvState;
    /// Advances one step. The action is clipped into the box internally.
    fn step(&self, state: &EnvState, action: &[f64], rng: &mut EnvRng) -> CmdpStep;
    fn observe(&self, state: &EnvState) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    /// `±noise_std` with equal probability; lets oracles enumerate outcomes.
    Rademacher,
}

fn draw_noise(kind: NoiseKind, std: f64, rng: &mut EnvRng) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    match kind {
        NoiseKind::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        }
        NoiseKind::Rademacher => {
            if rng.random::<bool>() {
                std
            } else {
                -std
            }
        }
    }
}

/// Point mass driven by a bounded acceleration. Reward is progress minus a
/// control penalty; every step above the speed threshold costs 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyVelocitySpec {
    pub dt: f64,
    pub v_threshold: f64,
    pub accel_low: f64,
    pub accel_high: f64,
    pub ctrl_weight: f64,
    pub horizon: usize,
    pub noise_std: f64,
    pub noise: NoiseKind,
    /// Half-width of the uniform perturbation of the initial `(x, v)`.
    pub init_width: f64,
}

impl Default for ToyVelocitySpec {
    fn default() -> Self {
        Self {
            dt: 0.05,
            v_threshold: 1.0,
            accel_low: -1.0,
            accel_high: 1.0,
            ctrl_weight: 0.001,
            horizon: 200,
            noise_std: 0.01,
            noise: NoiseKind::Gaussian,
            init_width: 0.05,
        }
    }
}

impl ToyVelocitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.accel_low < self.accel_high && self.horizon >= 1) {
            return Err(CoxqError::Config("toy_velocity needs dt > 0, accel_low < accel_high, horizon >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.init_width >= 0.0 && self.ctrl_weight >= 0.0) {
            return Err(CoxqError::Config("toy_velocity noise, init width and ctrl weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn noiseless(self) -> Self {
        Self {
            noise_std: 0.0,
            init_width: 0.0,
            ..self
        }
    }
}

/// State `(x, v)`; the agent observes the velocity only, since position never
/// enters the reward, cost or dynamics of the velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVelocity {
    pub spec: ToyVelocitySpec,
}

impl ToyVelocity {
    pub fn new(spec: ToyVelocitySpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl Cmdp for ToyVelocity {
    fn name(&self) -> &'static str {
        "toy_velocity"
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_box(&self) -> ActionBox {
        ActionBox::new(vec![self.spec.accel_low], vec![self.spec.accel_high]).expect("validated box")
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&self, rng: &mut EnvRng) -> EnvState {
        let w = self.spec.init_width;
        let (x, v) = if w > 0.0 {
            (rng.random_range(-w..=w), rng.random_range(-w..=w))
        } else {
            (0.0, 0.0)
        };
        EnvState { vars: vec![x, v], t: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64], rng: &mut EnvRng) -> CmdpStep {
        let s = &self.spec;
        let a = action[0].clamp(s.accel_low, s.accel_high);
        let (x, v) = (state.vars[0], state.vars[1]);
        let v_next = v + a * s.dt + draw_noise(s.noise, s.noise_std, rng);
        let x_next = x + v_next * s.dt;
        let t = state.t + 1;
        CmdpStep {
            next_state: EnvState {
                vars: vec![x_next, v_next],
                t,
            },
            reward: v_next * s.dt - s.ctrl_weight * a * a,
            cost: if v_next > s.v_threshold { 1.0 } else { 0.0 },
            terminated: false,
            truncated: t >= s.horizon,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        vec![state.vars[1]]
    }
}

/// One-dimensional walk to a goal with a cost pit on the way. The only reward
/// besides a control penalty is a terminal bonus at the goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySparseGoalSpec {
    pub step_size: f64,
    pub goal: f64,
    pub goal_bonus: f64,
    pub pit_low: f64,
    pub pit_high: f64,
    pub ctrl_weight: f64,
    pub horizon: usize,
    pub noise_std: f64,
    pub init_width: f64,
}

impl Default for ToySparseGoalSpec {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            goal: 1.0,
            goal_bonus: 30.0,
            pit_low: 0.45,
            pit_high: 0.55,
            ctrl_weight: 0.001,
            horizon: 100,
            noise_std: 0.005,
            init_width: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySparseGoal {
    pub spec: ToySparseGoalSpec,
}

impl ToySparseGoal {
    pub fn new(spec: ToySparseGoalSpec) -> Result<Self> {
        if !(spec.step_size > 0.0 && spec.horizon >= 1 && spec.pit_low <= spec.pit_high && spec.goal > 0.0) {
            return Err(CoxqError::Config("toy_sparse_goal needs step_size > 0, horizon >= 1, a valid pit and goal > 0".into()));
        }
        if !(spec.noise_std >= 0.0 && spec.init_width >= 0.0 && spec.ctrl_weight >= 0.0) {
            return Err(CoxqError::Config("toy_sparse_goal noise, init width and ctrl weight must be >= 0".into()));
        }
        Ok(Self { spec })
    }
}

impl Cmdp for ToySparseGoal {
    fn name(&self) -> &'static str {
        "toy_sparse_goal"
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_box(&self) -> ActionBox {
        ActionBox::symmetric(1, 1.0)
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&self, rng: &mut EnvRng) -> EnvState {
        let w = self.spec.init_width;
        let x = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        EnvState { vars: vec![x], t: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64], rng: &mut EnvRng) -> CmdpStep {
        let s = &self.spec;
        let a = action[0].clamp(-1.0, 1.0);
        let x_next = state.vars[0] + a * s.step_size + draw_noise(NoiseKind::Gaussian, s.noise_std, rng);
        let reached = x_next >= s.goal;
        let t = state.t + 1;
        CmdpStep {
            next_state: EnvState { vars: vec![x_next], t },
            reward: if reached { s.goal_bonus } else { 0.0 } - s.ctrl_weight * a * a,
            cost: if (s.pit_low..=s.pit_high).contains(&x_next) { 1.0 } else { 0.0 },
            terminated: reached,
            truncated: !reached && t >= s.horizon,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        vec![state.vars[0]]
    }
}

/// Deterministic initial state for a seed.
pub fn env_reset(env: &dyn Cmdp, seed: u64) -> EnvState {
    env.reset(&mut EnvRng::seed_from_u64(seed))
}

pub fn env_step(env: &dyn Cmdp, state: &EnvState, action: &[f64], rng: &mut EnvRng) -> Result<CmdpStep> {
    check_len(env.action_box().dim(), action.len())?;
    if action.iter().any(|a| !a.is_finite()) {
        return Err(CoxqError::invalid("non-finite action"));
    }
    Ok(env.step(state, action, rng))
}

/// A policy whose parameters do not change while it is being evaluated.
pub trait FrozenPolicy {
    fn act(&self, obs: &[f64], rng: &mut EnvRng) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> FrozenPolicy for F {
    fn act(&self, obs: &[f64], _rng: &mut EnvRng) -> Vec<f64> {
        self(obs)
    }
}

/// Ground-truth discounted return and cost distributions from simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub mean_return: f64,
    pub mean_cost: f64,
    pub return_quantiles: Vec<f64>,
    pub cost_quantiles: Vec<f64>,
    pub n_rollouts: usize,
    pub se_return: f64,
    pub se_cost: f64,
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical quantiles at the critic levels `(m - 0.5) / M`.
pub fn empirical_quantiles(samples: &[f64], m: usize) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    tau_levels(m)
        .into_iter()
        .map(|tau| sorted[((tau * n as f64) as usize).min(n - 1)])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    pub n_rollouts: usize,
    pub gamma: f64,
    /// Maximum steps per rollout, counted from `state`. The environment's own
    /// horizon is ignored so long-horizon values can be measured.
    pub horizon: usize,
    pub n_quantiles: usize,
}

/// Executes `action` at `state`, then follows `policy`, `n_rollouts` times.
pub fn mc_oracle(
    env: &dyn Cmdp,
    policy: &dyn FrozenPolicy,
    state: &EnvState,
    action: &[f64],
    settings: OracleSettings,
    rng: &mut EnvRng,
) -> Result<OracleEstimate> {
    if settings.n_rollouts == 0 {
        return Err(CoxqError::invalid("mc_oracle needs at least one rollout"));
    }
    if settings.n_quantiles == 0 {
        return Err(CoxqError::invalid("mc_oracle needs at least one quantile level"));
    }
    check_len(env.action_box().dim(), action.len())?;
    let mut returns = Vec::with_capacity(settings.n_rollouts);
    let mut costs = Vec::with_capacity(settings.n_rollouts);
    for _ in 0..settings.n_rollouts {
        let mut s = state.clone();
        let mut a = action.to_vec();
        let (mut g_r, mut g_c, mut discount) = (0.0, 0.0, 1.0);
        for k in 0..settings.horizon.max(1) {
            let step = env.step(&s, &a, rng);
            g_r += discount * step.reward;
            g_c += discount * step.cost;
            if step.terminated || k + 1 == settings.horizon.max(1) {
                break;
            }
            discount *= settings.gamma;
            if discount == 0.0 {
                break;
            }
            s = step.next_state;
            a = policy.act(&env.observe(&s), rng);
        }
        returns.push(g_r);
        costs.push(g_c);
    }
    let (mean_return, se_return) = mean_and_se(&returns);
    let (mean_cost, se_cost) = mean_and_se(&costs);
    Ok(OracleEstimate {
        mean_return,
        mean_cost,
        return_quantiles: empirical_quantiles(&returns, settings.n_quantiles),
        cost_quantiles: empirical_quantiles(&costs, settings.n_quantiles),
        n_rollouts: settings.n_rollouts,
        se_return,
        se_cost,
    })
}

/// Constrained optimum of the noiseless velocity task on a lattice.
///
/// Actions take the values `i / K` for `K = grid_resolution`, so the velocity
/// lattice with spacing `dt / K` is closed under the dynamics and the program
/// is exact on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub best_return: f64,
    pub grid_resolution: usize,
    pub v_min: f64,
    pub v_step: f64,
    pub n_v: usize,
    pub budget_levels: usize,
    /// Action index offset by `grid_resolution`, per `(t, budget, v)`.
    table: Vec<i32>,
}

impl DpSolution {
    fn v_index(&self, v: f64) -> usize {
        (((v - self.v_min) / self.v_step).round().max(0.0) as usize).min(self.n_v - 1)
    }

    /// Optimal acceleration at step `t` with `budget` cost units left.
    pub fn action(&self, t: usize, budget: usize, v: f64) -> f64 {
        let b = budget.min(self.budget_levels - 1);
        let idx = (t * self.budget_levels + b) * self.n_v + self.v_index(v);
        self.table[idx] as f64 / self.grid_resolution as f64
    }
}

pub fn dp_constrained_optimum(spec: &ToyVelocitySpec, grid_resolution: usize, d_episode: f64) -> Result<DpSolution> {
    spec.validate()?;
    if !(d_episode >= 0.0) {
        return Err(CoxqError::invalid("episode cost limit must be >= 0"));
    }
    if grid_resolution == 0 {
        return Err(CoxqError::invalid("grid resolution must be >= 1"));
    }
    let horizon = spec.horizon;
    let k = grid_resolution as i64;
    let h = spec.dt / grid_resolution as f64;
    let a_lo = (spec.accel_low * grid_resolution as f64).ceil() as i64;
    let a_hi = (spec.accel_high * grid_resolution as f64).floor() as i64;
    let unconstrained = d_episode >= horizon as f64;
    // Without slack the speed never needs to pass the threshold by more than
    // one step per budget unit.
    let budget_levels = if unconstrained { 1 } else { d_episode.floor() as usize + 1 };
    let v_hi = if unconstrained {
        spec.accel_high.max(0.0) * spec.dt * horizon as f64
    } else {
        spec.v_threshold.max(0.0) + (budget_levels as f64 + 1.0) * spec.accel_high.max(0.0) * spec.dt
    };
    let v_lo = (spec.accel_low.min(0.0) * spec.dt * horizon as f64).max(-0.1 - spec.dt);
    let lo_idx = (v_lo / h).floor() as i64;
    let hi_idx = (v_hi / h).ceil() as i64;
    let n_v = (hi_idx - lo_idx + 1) as usize;
    let v_of = |i: usize| (lo_idx + i as i64) as f64 * h;
    // Largest lattice index at or below the threshold; above it costs.
    let thr_idx = (spec.v_threshold / h + 1e-9).floor() as i64 - lo_idx;

    let neg = f64::NEG_INFINITY;
    let mut next = vec![0.0; budget_levels * n_v];
    let mut cur = vec![neg; budget_levels * n_v];
    let mut table = vec![0i32; horizon * budget_levels * n_v];
    for t in (0..horizon).rev() {
        for b in 0..budget_levels {
            for vi in 0..n_v {
                let mut best = neg;
                let mut best_a = 0i64;
                for ai in a_lo..=a_hi {
                    let vj = vi as i64 + ai;
                    if vj < 0 || vj >= n_v as i64 {
                        continue;
                    }
                    let costly = vj > thr_idx;
                    let nb = if unconstrained || !costly {
                        b
                    } else if b == 0 {
                        continue;
                    } else {
                        b - 1
                    };
                    let a = ai as f64 / k as f64;
                    let r = v_of(vj as usize) * spec.dt - spec.ctrl_weight * a * a;
                    let total = r + next[nb * n_v + vj as usize];
                    if total > best {
                        best = total;
                        best_a = ai;
                    }
                }
                cur[b * n_v + vi] = best;
                table[(t * budget_levels + b) * n_v + vi] = best_a as i32;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let v0 = (-lo_idx) as usize;
    let best_return = next[(budget_levels - 1) * n_v + v0];
    if !best_return.is_finite() {
        return Err(CoxqError::invalid("no feasible policy on the lattice"));
    }
    Ok(DpSolution {
        best_return,
        grid_resolution,
        v_min: lo_idx as f64 * h,
        v_step: h,
        n_v,
        budget_levels,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> ToyVelocity {
        ToyVelocity::new(ToyVelocitySpec::default().noiseless()).unwrap()
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let env = ToyVelocity::new(ToyVelocitySpec::default()).unwrap();
        assert_eq!(env_reset(&env, 7), env_reset(&env, 7));
        for seed in 0..10_000 {
            let s = env_reset(&env, seed);
            assert!(s.vars[1].abs() <= 0.05 && s.vars[0].abs() <= 0.05);
        }
        let s = env_reset(&noiseless(), 3);
        assert_eq!(s.vars, vec![0.0, 0.0]);
    }

    #[test]
    fn step_examples() {
        let env = noiseless();
        let mut rng = EnvRng::seed_from_u64(0);
        let s0 = EnvState { vars: vec![0.0, 0.0], t: 0 };
        let st = env_step(&env, &s0, &[0.0], &mut rng).unwrap();
        assert_eq!((st.reward, st.cost), (0.0, 0.0));
        let fast = EnvState { vars: vec![0.0, 1.0 + 1e-9], t: 0 };
        assert_eq!(env_step(&env, &fast, &[0.0], &mut rng).unwrap().cost, 1.0);
        // Internal clipping.
        let a = env_step(&env, &s0, &[5.0], &mut rng).unwrap();
        let b = env_step(&env, &s0, &[1.0], &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(env_step(&env, &s0, &[0.0, 1.0], &mut rng).is_err());
    }

    #[test]
    fn max_accel_rollout_matches_kinematics() {
        let env = noiseless();
        let spec = env.spec;
        let mut rng = EnvRng::seed_from_u64(0);
        let mut s = env_reset(&env, 0);
        for k in 1..=spec.horizon {
            let st = env.step(&s, &[1.0], &mut rng);
            let v = k as f64 * spec.dt;
            assert!((st.next_state.vars[1] - v).abs() < 1e-12);
            assert!((st.reward - (v * spec.dt - spec.ctrl_weight)).abs() < 1e-12);
            assert_eq!(st.cost, if st.next_state.vars[1] > spec.v_threshold { 1.0 } else { 0.0 });
            assert_eq!(st.truncated, k == spec.horizon);
            s = st.next_state;
        }
    }

    #[test]
    fn sparse_goal_terminates_with_bonus() {
        let env = ToySparseGoal::new(ToySparseGoalSpec {
            noise_std: 0.0,
            init_width: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = EnvRng::seed_from_u64(0);
        let mut s = env.reset(&mut rng);
        let (mut ret, mut cost) = (0.0, 0.0);
        loop {
            let st = env.step(&s, &[1.0], &mut rng);
            ret += st.reward;
            cost += st.cost;
            if st.terminated {
                break;
            }
            s = st.next_state;
        }
        assert!((ret - (30.0 - 0.001 * 20.0)).abs() < 1e-9);
        assert!(cost >= 2.0);
    }

    #[test]
    fn oracle_gamma_zero_is_one_step() {
        let env = ToyVelocity::new(ToyVelocitySpec::default()).unwrap();
        let mut rng = EnvRng::seed_from_u64(1);
        let s = EnvState { vars: vec![0.0, 0.5], t: 0 };
        let policy = |_: &[f64]| vec![1.0];
        let est = mc_oracle(
            &env,
            &policy,
            &s,
            &[0.2],
            OracleSettings {
                n_rollouts: 20_000,
                gamma: 0.0,
                horizon: 50,
                n_quantiles: 4,
            },
            &mut rng,
        )
        .unwrap();
        let expect = (0.5 + 0.2 * 0.05) * 0.05 - 0.001 * 0.04;
        assert!((est.mean_return - expect).abs() < 4.0 * est.se_return.max(1e-12));
        assert_eq!(est.mean_cost, 0.0);
    }

    #[test]
    fn oracle_deterministic_has_zero_variance() {
        let env = noiseless();
        let mut rng = EnvRng::seed_from_u64(1);
        let s = env_reset(&env, 0);
        let policy = |o: &[f64]| vec![if o[0] < 0.9 { 1.0 } else { 0.0 }];
        let settings = OracleSettings {
            n_rollouts: 5,
            gamma: 0.9,
            horizon: 100,
            n_quantiles: 3,
        };
        let est = mc_oracle(&env, &policy, &s, &[1.0], settings, &mut rng).unwrap();
        let single = mc_oracle(&env, &policy, &s, &[1.0], OracleSettings { n_rollouts: 1, ..settings }, &mut rng).unwrap();
        assert_eq!(est.se_return, 0.0);
        assert_eq!(est.mean_return, single.mean_return);
        assert!(est.return_quantiles.iter().all(|q| *q == single.mean_return));
    }

    #[test]
    fn oracle_matches_exhaustive_enumeration() {
        let spec = ToyVelocitySpec {
            noise: NoiseKind::Rademacher,
            noise_std: 0.3,
            v_threshold: 0.2,
            ..ToyVelocitySpec::default()
        };
        let env = ToyVelocity::new(spec).unwrap();
        let policy = |o: &[f64]| vec![if o[0] > 0.1 { -1.0 } else { 1.0 }];
        let s0 = EnvState { vars: vec![0.0, 0.0], t: 0 };
        let gamma = 0.9;
        // Enumerate all 2^3 sign patterns.
        let (mut er, mut ec) = (0.0, 0.0);
        for pattern in 0..8u32 {
            let mut v: f64 = 0.0;
            let mut a = 0.5;
            let (mut gr, mut gc, mut disc) = (0.0, 0.0, 1.0);
            for k in 0..3 {
                let eps = if pattern >> k & 1 == 1 { 0.3 } else { -0.3 };
                v += a * spec.dt + eps;
                gr += disc * (v * spec.dt - spec.ctrl_weight * a * a);
                gc += disc * if v > spec.v_threshold { 1.0 } else { 0.0 };
                disc *= gamma;
                a = policy(&[v])[0];
            }
            er += gr / 8.0;
            ec += gc / 8.0;
        }
        let mut rng = EnvRng::seed_from_u64(11);
        let est = mc_oracle(
            &env,
            &policy,
            &s0,
            &[0.5],
            OracleSettings {
                n_rollouts: 100_000,
                gamma,
                horizon: 3,
                n_quantiles: 8,
            },
            &mut rng,
        )
        .unwrap();
        assert!((est.mean_return - er).abs() < 3.0 * est.se_return, "{} vs {er}", est.mean_return);
        assert!((est.mean_cost - ec).abs() < 3.0 * est.se_cost, "{} vs {ec}", est.mean_cost);
        assert!(est.cost_quantiles.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn dp_zero_budget_pins_speed_at_threshold() {
        let spec = ToyVelocitySpec::default().noiseless();
        let sol = dp_constrained_optimum(&spec, 50, 0.0).unwrap();
        let pinned = spec.v_threshold * spec.dt * spec.horizon as f64;
        // The ramp to the threshold takes 20 steps and loses about half its area.
        assert!(sol.best_return < pinned);
        assert!(sol.best_return > pinned - 0.6, "{}", sol.best_return);
    }

    #[test]
    fn dp_slack_budget_is_unconstrained() {
        let spec = ToyVelocitySpec {
            horizon: 40,
            ..ToyVelocitySpec::default().noiseless()
        };
        let slack = dp_constrained_optimum(&spec, 50, 40.0).unwrap();
        // Full acceleration is optimal without a constraint.
        let full: f64 = (1..=40).map(|k| k as f64 * spec.dt * spec.dt - spec.ctrl_weight).sum();
        assert!((slack.best_return - full).abs() < 1e-9);
        let tight = dp_constrained_optimum(&spec, 50, 5.0).unwrap();
        assert!(tight.best_return < slack.best_return);
        assert!(dp_constrained_optimum(&spec, 50, -1.0).is_err());
    }

    #[test]
    fn dp_policy_replays_to_best_return() {
        let spec = ToyVelocitySpec::default().noiseless();
        let sol = dp_constrained_optimum(&spec, 50, 5.0).unwrap();
        let env = ToyVelocity::new(spec).unwrap();
        let mut rng = EnvRng::seed_from_u64(0);
        let mut s = env_reset(&env, 0);
        let (mut ret, mut cost, mut budget) = (0.0, 0.0, 5usize);
        for t in 0..spec.horizon {
            let a = sol.action(t, budget, s.vars[1]);
            let mut st = env.step(&s, &[a], &mut rng);
            // Snap to the lattice so float drift cannot flip the threshold test.
            let v = (st.next_state.vars[1] / sol.v_step).round() * sol.v_step;
            st.next_state.vars[1] = v;
            st.cost = if v > spec.v_threshold { 1.0 } else { 0.0 };
            st.reward = v * spec.dt - spec.ctrl_weight * a * a;
            ret += st.reward;
            cost += st.cost;
            budget -= st.cost as usize;
            s = st.next_state;
        }
        assert!(cost <= 5.0);
        assert!((ret - sol.best_return).abs() < 1e-6, "{ret} vs {}", sol.best_return);
    }
}
