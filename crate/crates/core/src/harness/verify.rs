//! Randomized oracle-equivalence batteries.
//!
//! Every suite draws `n_cases` random instances, evaluates the production
//! routine and an independent brute-force oracle, and records the largest
//! deviation. Oracles are written with plain scalar loops and share no code
//! with the routines they check.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::approximator::{critic_action_gradients, ActionBox, GaussianPolicy, Mlp, QuantileEnsemble};
use crate::error::{CoxqError, Result};
use crate::learner::{
    alm_penalty, critic_loss_and_grads, LagrangianState, Learner, LearnerConfig, TemperatureState,
};
use crate::quantile_critics::{
    cost_bounds, quantile_huber_loss, reward_upper_bound, truncate_pool, BoundConfig, Objective, QuantileAtoms,
    TruncationSpec,
};
use crate::sigma_geometry::{project_mgda, ActionGradient, DiagCovariance, ProjectionCase};
use crate::step_control::solve_step;

/// Failing cases kept verbatim in a report.
const MAX_DUMPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Suite {
    Lemma1,
    Lemma2,
    Bounds,
    Gradients,
    Quantiles,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Lemma1, Suite::Lemma2, Suite::Bounds, Suite::Gradients, Suite::Quantiles];

    /// Tolerance used when the caller does not give one.
    ///
    /// Lemma2 counts grid cells; Gradients is a relative error; the others are
    /// absolute.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Suite::Lemma1 => 1e-6,
            Suite::Lemma2 => 1.0,
            Suite::Bounds => 1e-9,
            Suite::Gradients => 1e-4,
            Suite::Quantiles => 1e-9,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::Lemma1 => "lemma1",
            Suite::Lemma2 => "lemma2",
            Suite::Bounds => "bounds",
            Suite::Gradients => "gradients",
            Suite::Quantiles => "quantiles",
        };
        f.write_str(name)
    }
}

impl FromStr for Suite {
    type Err = CoxqError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                CoxqError::invalid(format!(
                    "unknown suite `{s}`; expected one of lemma1, lemma2, bounds, gradients, quantiles"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub cases: usize,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub failures: usize,
    /// Up to ten failing cases, formatted for reproduction.
    pub failing_cases: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} cases, max deviation {:.3e} (tol {:.1e}), {} failing -> {}",
            self.suite,
            self.cases,
            self.max_deviation,
            self.tolerance,
            self.failures,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for case in &self.failing_cases {
            writeln!(f, "  {case}")?;
        }
        Ok(())
    }
}

struct Tally {
    tol: f64,
    max_dev: f64,
    failures: usize,
    dumps: Vec<String>,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Self {
            tol,
            max_dev: 0.0,
            failures: 0,
            dumps: Vec::new(),
        }
    }

    /// Records one deviation; NaN counts as a failure.
    fn check(&mut self, dev: f64, describe: impl FnOnce() -> String) {
        let dev = if dev.is_nan() { f64::INFINITY } else { dev };
        self.max_dev = self.max_dev.max(dev);
        if dev > self.tol {
            self.failures += 1;
            if self.dumps.len() < MAX_DUMPS {
                self.dumps.push(format!("deviation {dev:.3e}: {}", describe()));
            }
        }
    }

    fn fail(&mut self, what: String) {
        self.failures += 1;
        if self.dumps.len() < MAX_DUMPS {
            self.dumps.push(what);
        }
    }
}

pub fn run_verify(suite: Suite, n_cases: usize, seed: u64, tolerance: Option<f64>) -> Result<VerifyReport> {
    let tol = tolerance.unwrap_or(suite.default_tolerance());
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CoxqError::invalid(format!("tolerance must be > 0, got {tol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new(tol);
    match suite {
        Suite::Lemma1 => lemma1(n_cases, &mut rng, &mut tally)?,
        Suite::Lemma2 => lemma2(n_cases, &mut rng, &mut tally),
        Suite::Bounds => bounds(n_cases, &mut rng, &mut tally)?,
        Suite::Gradients => gradients(n_cases, &mut rng, &mut tally)?,
        Suite::Quantiles => quantiles(n_cases, &mut rng, &mut tally)?,
    }
    Ok(VerifyReport {
        suite,
        cases: n_cases,
        tolerance: tol,
        max_deviation: tally.max_dev,
        failures: tally.failures,
        failing_cases: tally.dumps,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ---------------------------------------------------------------------------
// Cone projection

/// Euclidean projection of `y` onto `{y : n_i · y >= 0}` in whitened
/// coordinates, by enumerating every active set and keeping the closest
/// feasible candidate.
fn cone_oracle(y: &[f64], normals: &[Vec<f64>]) -> Vec<f64> {
    let live: Vec<&Vec<f64>> = normals.iter().filter(|n| dot(n, n).sqrt() >= 1e-12).collect();
    let scale = live.iter().map(|n| dot(n, n)).fold(dot(y, y), f64::max).max(1.0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1usize << live.len()) {
        // Orthonormal basis of the active normals.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (i, n) in live.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let mut v = (*n).clone();
            for q in &basis {
                let c = dot(&v, q);
                for k in 0..v.len() {
                    v[k] -= c * q[k];
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-9 * dot(n, n).sqrt() {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        let mut cand = y.to_vec();
        for q in &basis {
            let c = dot(y, q);
            for k in 0..cand.len() {
                cand[k] -= c * q[k];
            }
        }
        if live.iter().all(|n| dot(n, &cand) >= -1e-12 * scale) {
            let mut dist = 0.0;
            for k in 0..y.len() {
                dist += (cand[k] - y[k]).powi(2);
            }
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, cand));
            }
        }
    }
    best.map(|(_, c)| c).unwrap_or_else(|| vec![0.0; y.len()])
}

fn lemma1(n_cases: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    for case in 0..n_cases {
        let n = [2, 3, 5][case % 3];
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let g_r = normal_vec(rng, n, 1.0);
        let roll: f64 = rng.random();
        let g_c = if roll < 0.1 {
            let k = rng.random_range(-2.0..2.0);
            g_r.iter().map(|v| k * v).collect()
        } else if roll < 0.15 {
            vec![0.0; n]
        } else {
            normal_vec(rng, n, 1.0)
        };
        let lambda = rng.random_range(0.0..5.0);
        let cov = DiagCovariance::new(sigma.clone())?;
        let ar = ActionGradient::new(g_r.clone())?;
        let ac = ActionGradient::new(g_c.clone())?;
        let out = project_mgda(&ar, &ac, lambda, &cov)?;
        let u = out.g_star.as_slice();

        let root: Vec<f64> = sigma.iter().map(|s| s.sqrt()).collect();
        let g_raw: Vec<f64> = (0..n).map(|i| g_r[i] - lambda * g_c[i]).collect();
        let y_raw: Vec<f64> = (0..n).map(|i| root[i] * g_raw[i]).collect();
        let n1: Vec<f64> = (0..n).map(|i| root[i] * g_r[i]).collect();
        let n2: Vec<f64> = (0..n).map(|i| -root[i] * g_c[i]).collect();
        let y_star = cone_oracle(&y_raw, &[n1, n2]);
        let y_out: Vec<f64> = (0..n).map(|i| root[i] * u[i]).collect();

        let mut dev = 0.0;
        for i in 0..n {
            dev += (y_out[i] - y_star[i]).powi(2);
        }
        let dev = dev.sqrt();

        // KKT residuals of the returned multipliers.
        let s_inner = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for i in 0..n {
                s += a[i] * sigma[i] * b[i];
            }
            s
        };
        let c_r = s_inner(&g_r, u);
        let c_c = -s_inner(&g_c, u);
        let mut kkt = 0.0f64;
        if out.case_id != ProjectionCase::DegenerateZero {
            kkt = kkt.max(-c_r).max(-c_c).max(-out.mu_r).max(-out.mu_c);
            kkt = kkt.max((out.mu_r * c_r).abs()).max((out.mu_c * c_c).abs());
            let mut stat = 0.0;
            for i in 0..n {
                let r = u[i] - (g_raw[i] + out.mu_r * g_r[i] - out.mu_c * g_c[i]);
                stat += r * r * sigma[i];
            }
            kkt = kkt.max(stat.sqrt());
        }
        tally.check(dev.max(kkt), || {
            format!(
                "case {case}: g_r={g_r:?} g_c={g_c:?} lambda={lambda} sigma={sigma:?} got {u:?} ({:?}, mu=({}, {})) oracle_dev={dev:.3e} kkt={kkt:.3e}",
                out.case_id, out.mu_r, out.mu_c
            )
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Step length

/// Largest minimizer of `max(0, η s - r)` over a uniform grid on `[0, η_max]`.
fn step_grid_oracle(s: f64, r: f64, eta_max: f64, points: usize) -> f64 {
    if s == 0.0 {
        // A zero slope leaves the objective flat; the solver takes no step.
        return 0.0;
    }
    let h = eta_max / points as f64;
    let phi = |eta: f64| (eta * s - r).max(0.0);
    let mut best = f64::INFINITY;
    for k in 0..=points {
        best = best.min(phi(k as f64 * h));
    }
    let slack = 1e-12 * (1.0 + best.abs());
    let mut arg = 0.0;
    for k in 0..=points {
        if phi(k as f64 * h) <= best + slack {
            arg = k as f64 * h;
        }
    }
    arg
}

fn lemma2(n_cases: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) {
    const POINTS: usize = 100_000;
    for case in 0..n_cases {
        let roll: f64 = rng.random();
        let mut s = rng.random_range(-2.0..2.0);
        let mut r = rng.random_range(-2.0..2.0);
        if roll < 0.05 {
            s = 0.0;
        } else if roll < 0.1 {
            r = 0.0;
        }
        let eta_max = if rng.random::<f64>() < 0.05 { 0.0 } else { rng.random_range(0.0..6.0) };
        let got = solve_step(s, r, eta_max);
        let want = step_grid_oracle(s, r, eta_max, POINTS);
        let cell = if eta_max > 0.0 { eta_max / POINTS as f64 } else { 1.0 };
        let dev = (got.eta_star - want).abs() / cell;
        tally.check(dev, || {
            format!(
                "case {case}: s={s} r={r} eta_max={eta_max} got {} ({:?}) grid {want}",
                got.eta_star, got.case_id
            )
        });
    }
}

// ---------------------------------------------------------------------------
// Quantile bounds and truncation

fn bounds(n_cases: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    for case in 0..n_cases {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=30);
        let scale = rng.random_range(0.1..10.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, m, scale)).collect();
        let beta = rng.random_range(0.0..5.0);
        let alpha = rng.random_range(1..=m);
        let atoms = QuantileAtoms::from_rows(&rows)?;
        let (lb, ub, mean) = cost_bounds(&atoms, beta, alpha)?;
        let (r_ub, r_mean) = reward_upper_bound(&atoms, beta);

        let nf = n as f64;
        let mut mus = vec![0.0; m];
        let mut sds = vec![0.0; m];
        for q in 0..m {
            let mut s = 0.0;
            for row in &rows {
                s += row[q];
            }
            mus[q] = s / nf;
            let mut v = 0.0;
            for row in &rows {
                v += (row[q] - mus[q]) * (row[q] - mus[q]);
            }
            sds[q] = (v / nf).sqrt();
        }
        let (mut o_lb, mut o_ub, mut o_rub, mut o_mean) = (0.0, 0.0, 0.0, 0.0);
        for q in 0..m {
            if q >= m - alpha {
                o_lb += (mus[q] - beta * sds[q]) / alpha as f64;
                o_ub += (mus[q] + beta * sds[q]) / alpha as f64;
            }
            o_rub += (mus[q] + beta * sds[q]) / m as f64;
            o_mean += mus[q] / m as f64;
        }
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
        let dev = rel(lb, o_lb)
            .max(rel(ub, o_ub))
            .max(rel(mean, o_mean))
            .max(rel(r_ub, o_rub))
            .max(rel(r_mean, o_mean));
        tally.check(dev, || {
            format!("case {case}: N={n} M={m} beta={beta} alpha={alpha} got ({lb}, {ub}, {mean}, {r_ub}) oracle ({o_lb}, {o_ub}, {o_mean}, {o_rub})")
        });
        if lb > ub + 1e-12 * (1.0 + ub.abs()) {
            tally.fail(format!("case {case}: lower bound {lb} above upper bound {ub}"));
        }

        // Truncation keeps the right order statistics.
        let pool: Vec<f64> = rows.iter().flatten().copied().collect();
        let k = rng.random_range(0..pool.len());
        let spec = TruncationSpec { k_r: k, k_c: k };
        let mut sorted = pool.clone();
        for i in 1..sorted.len() {
            let mut j = i;
            while j > 0 && sorted[j - 1] > sorted[j] {
                sorted.swap(j - 1, j);
                j -= 1;
            }
        }
        let kept_r = truncate_pool(pool.clone(), spec, Objective::Reward);
        let kept_c = truncate_pool(pool.clone(), spec, Objective::Cost);
        if kept_r[..] != sorted[..pool.len() - k] || kept_c[..] != sorted[k..] {
            tally.fail(format!("case {case}: truncation of {} atoms by {k} kept the wrong atoms", pool.len()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks

const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero derivatives do not
/// dominate the report.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Random weights and nonzero biases. Zero biases would put a unit exactly on
/// its ReLU kink whenever the layer below is entirely inactive.
fn random_net(sizes: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
    let mut net = Mlp::new(sizes, 1.0, rng);
    for (k, t) in net.tensors_mut().into_iter().enumerate() {
        if k % 2 == 1 {
            for b in t.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *b = 0.3 * z;
            }
        }
    }
    net
}

/// A small learner with randomly initialized, non-trivial critics and a
/// policy whose actions stay inside a wide box.
fn random_learner(rng: &mut ChaCha8Rng, obs: usize, act: usize) -> Result<Learner> {
    let m = 6;
    let n = 3;
    let hidden = [7, 5];
    let policy = GaussianPolicy::from_net(random_net(&[obs, 6, 2 * act], rng))?;
    let critic = |rng: &mut ChaCha8Rng| -> Result<QuantileEnsemble> {
        let nets = (0..n).map(|_| random_net(&[obs + act, hidden[0], hidden[1], m], rng)).collect();
        QuantileEnsemble::from_critics(nets, obs, act)
    };
    let reward = critic(rng)?;
    let cost = critic(rng)?;
    let lambda = rng.random_range(0.0..3.0);
    let mut lagrangian = LagrangianState::new(lambda, 1e-3, rng.random_range(0.5..10.0), 5.0, 100, 0.99)?;
    // Place the limit so that both ALM branches occur across cases.
    lagrangian.d_q = rng.random_range(-3.0..3.0);
    let temperature = TemperatureState::new(rng.random_range(0.05..1.0), -(act as f64), 3e-4, true)?;
    let config = LearnerConfig {
        gamma: 0.9,
        lr_actor: 1e-3,
        lr_critic: 1e-3,
        huber_kappa: 1.0,
        truncation: TruncationSpec { k_r: 2, k_c: 3 },
        bounds: BoundConfig {
            beta_r: rng.random_range(0.0..3.0),
            beta_c: rng.random_range(0.0..3.0),
            alpha: rng.random_range(1..=m),
        },
        entropy_bonus: true,
        mean_box_weight: 1.0,
    };
    Learner::new(policy, reward, cost, 0.005, lagrangian, temperature, ActionBox::symmetric(act, 50.0), config)
}

/// Checks `analytic[idx]` against central differences of `f` in `params[idx]`
/// for a random subset of flat parameter indices.
fn check_params(
    tally: &mut Tally,
    label: &str,
    tensors: Vec<Vec<f64>>,
    analytic: Vec<Vec<f64>>,
    picks: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(usize, usize, f64) -> f64,
) {
    for _ in 0..picks {
        let t = rng.random_range(0..tensors.len());
        let i = rng.random_range(0..tensors[t].len());
        let x0 = tensors[t][i];
        let num = central_diff(|x| f(t, i, x), x0);
        let ana = analytic[t][i];
        tally.check(rel_err(ana, num), || format!("{label}: tensor {t} index {i}: analytic {ana} numeric {num}"));
    }
}

fn set_param(net: &mut Mlp, t: usize, i: usize, x: f64) {
    net.tensors_mut()[t][i] = x;
}

fn gradients(n_cases: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    for case in 0..n_cases {
        let obs = rng.random_range(1..=3);
        let act = rng.random_range(1..=3);
        let batch = 4;
        let learner = random_learner(rng, obs, act)?;
        let states = Array2::from_shape_fn((batch, obs), |_| StandardNormal.sample(rng));
        let xi = learner.sample_noise(batch, rng);

        // Policy parameters through the full actor objective.
        let obj = learner.actor_objective(states.view(), &xi)?;
        let tensors: Vec<Vec<f64>> = learner.policy.net.tensors().map(<[f64]>::to_vec).collect();
        let analytic: Vec<Vec<f64>> = obj.grads.tensors().map(<[f64]>::to_vec).collect();
        let mut probe = learner.clone();
        check_params(tally, &format!("case {case} actor"), tensors, analytic, 8, rng, |t, i, x| {
            set_param(&mut probe.policy.net, t, i, x);
            let loss = probe.actor_objective(states.view(), &xi).map(|o| o.stats.loss).unwrap_or(f64::NAN);
            set_param(&mut probe.policy.net, t, i, learner.policy.net.tensors().nth(t).expect("tensor")[i]);
            loss
        });

        // Critic parameters through the quantile-Huber loss.
        let actions = Array2::from_shape_fn((batch, act), |_| StandardNormal.sample(rng));
        let x = QuantileEnsemble::join_inputs(states.view(), actions.view());
        let targets: Vec<Vec<f64>> = (0..batch).map(|_| normal_vec(rng, 5, 2.0)).collect();
        let kappa = rng.random_range(0.3..2.0);
        let (_, grads) = critic_loss_and_grads(&learner.reward, x.view(), &targets, kappa);
        let critic_idx = rng.random_range(0..learner.reward.n_critics());
        let tensors: Vec<Vec<f64>> = learner.reward.critics[critic_idx].tensors().map(<[f64]>::to_vec).collect();
        let analytic: Vec<Vec<f64>> = grads[critic_idx].tensors().map(<[f64]>::to_vec).collect();
        let mut ens = learner.reward.clone();
        check_params(tally, &format!("case {case} critic"), tensors.clone(), analytic, 8, rng, |t, i, v| {
            set_param(&mut ens.critics[critic_idx], t, i, v);
            let loss = critic_loss_and_grads(&ens, x.view(), &targets, kappa).0;
            set_param(&mut ens.critics[critic_idx], t, i, tensors[t][i]);
            loss
        });

        // Action gradients of the three exploration bounds.
        let state = normal_vec(rng, obs, 1.0);
        let a0 = normal_vec(rng, act, 1.0);
        let cfg = learner.config.bounds;
        let (triple, _) = critic_action_gradients(&learner.reward, &learner.cost, &state, &cfg, &a0)?;
        for j in 0..act {
            let eval = |x: f64, pick: usize| {
                let mut a = a0.clone();
                a[j] = x;
                let r = learner.reward.predict_atoms(&state, &a).expect("dims");
                let c = learner.cost.predict_atoms(&state, &a).expect("dims");
                match pick {
                    0 => reward_upper_bound(&r, cfg.beta_r).0,
                    1 => cost_bounds(&c, cfg.beta_c, cfg.alpha).expect("valid").0,
                    _ => c.mean(),
                }
            };
            for (pick, g) in [&triple.g_r, &triple.g_c, &triple.g_m].into_iter().enumerate() {
                let num = central_diff(|x| eval(x, pick), a0[j]);
                tally.check(rel_err(g[j], num), || {
                    format!("case {case} action grad {pick} dim {j}: analytic {} numeric {num}", g[j])
                });
            }
        }

        // ALM penalty in its argument, away from the branch switch.
        let lam: f64 = rng.random_range(0.0..3.0);
        let c: f64 = rng.random_range(0.1..10.0);
        let d: f64 = rng.random_range(-2.0..2.0);
        let mut q: f64 = rng.random_range(-4.0..4.0);
        if (lam + c * (q - d)).abs() < 1e-3 {
            q += 0.01;
        }
        let (_, ana) = alm_penalty(q, lam, c, d);
        let num = central_diff(|x| alm_penalty(x, lam, c, d).0, q);
        tally.check(rel_err(ana, num), || format!("case {case} alm: q={q} lambda={lam} c={c} d={d}: analytic {ana} numeric {num}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Quantile-Huber loss

fn naive_quantile_huber(rows: &[Vec<f64>], targets: &[f64], kappa: f64) -> f64 {
    let m = rows[0].len();
    let mut total = 0.0;
    for row in rows {
        for (q, pred) in row.iter().enumerate() {
            let tau = (2 * q + 1) as f64 / (2 * m) as f64;
            for z in targets {
                let u = z - pred;
                let huber = if u.abs() <= kappa { 0.5 * u * u } else { kappa * (u.abs() - 0.5 * kappa) };
                let indicator = if u < 0.0 { 1.0 } else { 0.0 };
                total += (tau - indicator).abs() * huber / kappa;
            }
        }
    }
    total / (rows.len() * m * targets.len()) as f64
}

fn quantiles(n_cases: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    for case in 0..n_cases {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=12);
        let k = rng.random_range(1..=20);
        let kappa = rng.random_range(0.05..3.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, m, 2.0)).collect();
        let targets = normal_vec(rng, k, 2.0);
        let atoms = QuantileAtoms::from_rows(&rows)?;
        let (loss, grad) = quantile_huber_loss(&atoms, &targets, kappa)?;
        let want = naive_quantile_huber(&rows, &targets, kappa);
        let dev = (loss - want).abs() / (1.0 + want.abs());
        tally.check(dev, || format!("case {case}: loss {loss} naive {want} (N={n} M={m} K={k} kappa={kappa})"));

        // The gradient of a piecewise quadratic is exact under central
        // differences away from the kinks; compare at a random atom.
        let (i, q) = (rng.random_range(0..n), rng.random_range(0..m));
        let num = central_diff(
            |x| {
                let mut r = rows.clone();
                r[i][q] = x;
                naive_quantile_huber(&r, &targets, kappa)
            },
            rows[i][q],
        );
        let dev = (grad[[i, q]] - num).abs() / (1.0 + num.abs());
        // The difference quotient carries O(h) error near a kink at |u| = κ.
        tally.check((dev - 1e-6).max(0.0), || {
            format!("case {case}: grad[{i},{q}] {} numeric {num}", grad[[i, q]])
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert_eq!("Lemma1".parse::<Suite>().unwrap(), Suite::Lemma1);
        assert!("lemma3".parse::<Suite>().is_err());
    }

    #[test]
    fn cone_oracle_projects_onto_half_space() {
        let y = cone_oracle(&[-1.0, 2.0], &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(y, vec![0.0, 2.0]);
    }

    #[test]
    fn grid_oracle_cases() {
        assert_eq!(step_grid_oracle(-1.0, 0.5, 2.0, 1000), 2.0);
        assert_eq!(step_grid_oracle(1.0, -0.5, 2.0, 1000), 0.0);
        assert!((step_grid_oracle(1.0, 0.5, 2.0, 1000) - 0.5).abs() < 2e-3);
    }
}
