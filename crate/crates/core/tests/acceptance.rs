//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line to
//! stderr (outside the test harness capture) before asserting.
//!
//! Criteria 6 and 7 share one batch of full-length training runs, which takes
//! tens of minutes on a single core.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use coxq::approximator::{ActionBox, GaussianPolicy, QuantileEnsemble};
use coxq::envs::dp_constrained_optimum;
use coxq::harness::config::TrainConfig;
use coxq::harness::metrics::{to_jsonl, MetricsRecord};
use coxq::harness::trainer::{run_train, Trainer};
use coxq::harness::verify::{run_verify, Suite, VerifyReport};
use coxq::learner::{convert_limit, Batch, LagrangianState, Learner, LearnerConfig, TemperatureState};
use coxq::quantile_critics::{BoundConfig, TruncationSpec};
use coxq::step_control::TrustRegion;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id}: {verdict} - {detail}");
}

fn verify_criterion(id: u32, suite: Suite, cases: usize, tol: f64, limit: Duration) {
    let start = Instant::now();
    let r: VerifyReport = run_verify(suite, cases, 2024, Some(tol)).unwrap();
    let elapsed = start.elapsed();
    let passed = r.passed() && elapsed < limit;
    report(
        id,
        passed,
        &format!(
            "{} cases, max deviation {:.2e} (tol {tol:.0e}), {} failing, {:.1}s",
            r.cases,
            r.max_deviation,
            r.failures,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed, "{r}");
}

#[test]
fn criterion_01_projection_oracle() {
    // The suite cycles n over {2, 3, 5}: 600 cases give 200 per dimension.
    verify_criterion(1, Suite::Lemma1, 600, 1e-6, Duration::from_secs(60));
}

#[test]
fn criterion_02_step_length_oracle() {
    verify_criterion(2, Suite::Lemma2, 1000, 1.0, Duration::from_secs(10));
}

#[test]
fn criterion_03_gradients() {
    verify_criterion(3, Suite::Gradients, 50, 1e-4, Duration::from_secs(60));
}

// ---------------------------------------------------------------------------
// Criterion 4: quantile convergence on single-state MDPs.

fn single_state_learner(m: usize, kappa: f64, gamma: f64, seed: u64) -> Learner {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = GaussianPolicy::new(1, 1, &[8], &mut rng);
    let reward = QuantileEnsemble::new(1, 1, &[32, 32], 2, m, &mut rng);
    let cost = QuantileEnsemble::new(1, 1, &[8], 2, m, &mut rng);
    Learner::new(
        policy,
        reward,
        cost,
        0.05,
        LagrangianState::new(0.0, 0.0, 1.0, 1.0, 10, 0.5).unwrap(),
        TemperatureState::new(0.1, -1.0, 1e-3, false).unwrap(),
        ActionBox::symmetric(1, 1.0),
        LearnerConfig {
            gamma,
            lr_actor: 1e-3,
            lr_critic: 3e-3,
            huber_kappa: kappa,
            truncation: TruncationSpec { k_r: 1, k_c: 1 },
            bounds: BoundConfig {
                beta_r: 1.0,
                beta_c: 1.0,
                alpha: 1,
            },
            entropy_bonus: false,
            mean_box_weight: 1.0,
        },
    )
    .unwrap()
}

/// Trains the reward critics on transitions `0 -> 0` with rewards from `draw`
/// and returns the atoms averaged over critics and probe actions.
fn train_single_state(
    learner: &mut Learner,
    steps: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = 64;
    for _ in 0..steps {
        let batch = Batch {
            obs: Array2::zeros((b, 1)),
            actions: Array2::from_shape_fn((b, 1), |_| rng.random_range(-1.0..1.0)),
            rewards: (0..b).map(|_| draw(&mut rng)).collect(),
            costs: vec![0.0; b],
            next_obs: Array2::zeros((b, 1)),
            terminated: vec![false; b],
        };
        learner.critic_update(&batch, &mut rng).unwrap();
        learner.polyak_update().unwrap();
    }
    let m = learner.reward.n_quantiles();
    let probes = [-0.5, 0.0, 0.5];
    let mut mean = vec![0.0; m];
    for a in probes {
        let atoms = learner.reward.predict_atoms(&[0.0], &[a]).unwrap();
        for row in atoms.atoms().rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v / (probes.len() * learner.reward.n_critics()) as f64;
            }
        }
    }
    mean
}

#[test]
fn criterion_04_quantile_convergence() {
    let start = Instant::now();
    // Bernoulli(0.5) rewards, γ = 0. The quantile-regression limit (small κ)
    // is used; with κ = 1 the Huber loss pulls the atoms toward expectiles.
    let mut bern = single_state_learner(4, 0.01, 0.0, 1);
    let atoms = train_single_state(&mut bern, 3000, |r| if r.random::<bool>() { 1.0 } else { 0.0 });
    let want = [0.0, 0.0, 1.0, 1.0];
    let bern_dev = atoms.iter().zip(want).map(|(a, w)| (a - w).abs()).fold(0.0, f64::max);

    // Deterministic reward 1, γ = 0.5: every atom converges to 2.
    let mut chain = single_state_learner(4, 1.0, 0.5, 2);
    let chain_atoms = train_single_state(&mut chain, 3000, |_| 1.0);
    let chain_dev = chain_atoms.iter().map(|a| (a - 2.0).abs() / 2.0).fold(0.0, f64::max);

    let elapsed = start.elapsed();
    let passed = bern_dev <= 0.05 && chain_dev <= 0.02 && elapsed < Duration::from_secs(120);
    report(
        4,
        passed,
        &format!(
            "bernoulli atoms {atoms:.3?} (max dev {bern_dev:.3}), chain atoms {chain_atoms:.3?} (max rel dev {chain_dev:.4}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_05_bound_algebra() {
    verify_criterion(5, Suite::Bounds, 1000, 1e-9, Duration::from_secs(10));
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: full training runs on ToyVelocity.

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct RunResult {
    seed: u64,
    cox: bool,
    records: Vec<MetricsRecord>,
    final_eval_cost: f64,
    final_eval_return: f64,
    elapsed: Duration,
}

impl RunResult {
    /// Mean training episode cost over the second half of the run.
    fn late_training_cost(&self) -> f64 {
        let total = self.records.last().map_or(0, |r| r.step);
        let late: Vec<f64> = self
            .records
            .iter()
            .filter(|r| 2 * r.step > total)
            .filter_map(|r| r.episode_cost.map(|c| (c, r.episodes)))
            .flat_map(|(c, n)| std::iter::repeat_n(c, n as usize))
            .collect();
        late.iter().sum::<f64>() / late.len().max(1) as f64
    }
}

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_velocity.toml")
}

fn training_runs() -> &'static [RunResult] {
    static RUNS: OnceLock<Vec<RunResult>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        for seed in SEEDS {
            for cox in [true, false] {
                let mut cfg = TrainConfig::from_file(&config_path()).unwrap();
                cfg.run.seed = seed;
                cfg.run.cox = cox;
                cfg.run.out_dir = dir.path().join(format!("seed{seed}-cox{cox}"));
                let start = Instant::now();
                let outcome = run_train(cfg).unwrap();
                let eval = outcome.final_eval.expect("final evaluation");
                out.push(RunResult {
                    seed,
                    cox,
                    records: outcome.records,
                    final_eval_cost: eval.mean_cost,
                    final_eval_return: eval.mean_return,
                    elapsed: start.elapsed(),
                });
            }
        }
        out
    })
}

#[test]
fn criterion_06_constrained_training() {
    let cfg = TrainConfig::from_file(&config_path()).unwrap();
    assert_eq!(cfg.run.total_steps, 150_000);
    assert_eq!(cfg.horizon(), 200);
    let d = cfg.constraint.episode_cost_limit;
    assert_eq!(d, 5.0);
    let optimum = dp_constrained_optimum(&cfg.toy_velocity, 50, d).unwrap().best_return;
    let runs = training_runs();
    let mut passed = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let with = runs.iter().find(|r| r.seed == seed && r.cox).unwrap();
        let without = runs.iter().find(|r| r.seed == seed && !r.cox).unwrap();
        let a = with.final_eval_cost <= d + 1.0;
        let b = with.late_training_cost() <= 1.5 * d;
        let c = with.final_eval_return >= 0.8 * optimum;
        let time_ok = with.elapsed < Duration::from_secs(30 * 60);
        passed &= a && b && c && time_ok;
        lines.push(format!(
            "seed {seed}: eval cost {:.2} [{}], late train cost {:.2} [{}], eval return {:.3} / {optimum:.3} [{}], no-cox late train cost {:.2}, {:.0}s",
            with.final_eval_cost,
            if a { "ok" } else { "x" },
            with.late_training_cost(),
            if b { "ok" } else { "x" },
            with.final_eval_return,
            if c { "ok" } else { "x" },
            without.late_training_cost(),
            with.elapsed.as_secs_f64()
        ));
    }
    // (d): paired over seeds, exploration must not raise training cost by more than 5%.
    let mean = |cox: bool| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.cox == cox).map(RunResult::late_training_cost).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (cost_with, cost_without) = (mean(true), mean(false));
    let d_ok = cost_with <= 1.05 * cost_without;
    passed &= d_ok;
    report(
        6,
        passed,
        &format!(
            "late training cost with/without exploration shift {cost_with:.2}/{cost_without:.2} [{}]; {}",
            if d_ok { "ok" } else { "x" },
            lines.join("; ")
        ),
    );
    assert!(passed);
}

/// Mean over seeds of the per-quarter mean absolute cost bias and oracle cost.
fn bias_quarters(runs: &[&RunResult]) -> ([f64; 4], [f64; 4]) {
    let mut bias = [0.0; 4];
    let mut oracle = [0.0; 4];
    for run in runs {
        let probes: Vec<&MetricsRecord> = run.records.iter().filter(|r| r.cost_bias_abs.is_some()).collect();
        let n = probes.len();
        for q in 0..4 {
            let part = &probes[q * n / 4..(q + 1) * n / 4];
            let k = part.len().max(1) as f64;
            bias[q] += part.iter().map(|r| r.cost_bias_abs.unwrap()).sum::<f64>() / k / runs.len() as f64;
            oracle[q] += part.iter().map(|r| r.oracle_cost.unwrap_or(0.0)).sum::<f64>() / k / runs.len() as f64;
        }
    }
    (bias, oracle)
}

#[test]
fn criterion_07_estimation_bias() {
    let runs: Vec<&RunResult> = training_runs().iter().filter(|r| r.cox).collect();
    let (bias, oracle) = bias_quarters(&runs);
    let monotone = bias[1] >= bias[2] && bias[2] >= bias[3];
    let close = bias[3] <= 0.15 * oracle[3];
    let passed = monotone && close;
    report(
        7,
        passed,
        &format!(
            "mean |bias| per quarter {bias:.3?} (monotone over last three: {monotone}), final-quarter oracle cost {:.3}, ratio {:.3}",
            oracle[3],
            bias[3] / oracle[3].max(f64::MIN_POSITIVE)
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_08_trust_region_controller() {
    let d = 5.0;
    let mut tr = TrustRegion::new(3.0, 0.25, 6.0, 0.5).unwrap();
    // Alternating over/under budget: exact ±1 steps.
    let mut seq = Vec::new();
    for k in 0..6 {
        let recent = if k % 2 == 0 { 7.0 } else { 3.0 };
        tr = tr.update_delta(recent, d);
        seq.push(tr.delta);
    }
    let mut ok = seq == [2.0, 3.0, 2.0, 3.0, 2.0, 3.0];
    // Far over budget clamps to the floor, far under to the ceiling.
    let mut bounded = Vec::new();
    for recent in [20.0, 20.0, 0.0, -100.0, 4.0, 5.0] {
        tr = tr.update_delta(recent, d);
        bounded.push(tr.delta);
    }
    ok &= bounded == [0.25, 0.25, 2.75, 6.0, 6.0, 6.0];
    // Non-finite inputs leave the radius unchanged.
    ok &= tr.update_delta(f64::NAN, d).delta == 6.0;
    report(8, ok, &format!("alternating sequence {seq:?}, clamped sequence {bounded:?}"));
    assert!(ok);
}

#[test]
fn criterion_09_limit_conversion() {
    let a = convert_limit(25.0, 1000, 0.99).unwrap();
    let b = convert_limit(10.0, 400, 0.975).unwrap();
    let ok = (a - 2.49989).abs() <= 1e-4 && (b - 0.99996).abs() <= 1e-4;
    report(9, ok, &format!("d_q(25, 1000, 0.99) = {a:.6}, d_q(10, 400, 0.975) = {b:.6}"));
    assert!(ok);
}

#[test]
fn criterion_10_determinism_and_resume() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let small = |out: PathBuf| {
        let mut cfg = TrainConfig::from_file(&config_path()).unwrap();
        cfg.run.total_steps = 8_000;
        cfg.run.log_interval = 1_000;
        cfg.run.eval_interval = 4_000;
        cfg.run.bias_rollouts = 10;
        cfg.agent.initial_steps = 2_000;
        cfg.run.out_dir = out;
        cfg
    };
    // Identical configs, output directory included, so the runs share it.
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    let a = run_train(small(dir.path().join("run"))).unwrap();
    let first = [
        read(&a.out_dir.join("metrics.jsonl")),
        read(&a.out_dir.join("metrics.csv")),
        read(&a.checkpoint),
    ];
    let b = run_train(small(dir.path().join("run"))).unwrap();
    let streams_equal = first[0] == read(&b.out_dir.join("metrics.jsonl"))
        && first[1] == read(&b.out_dir.join("metrics.csv"))
        && to_jsonl(&a.records) == to_jsonl(&b.records);
    let checkpoints_equal = first[2] == read(&b.checkpoint);

    // Resume: a trainer restored from a checkpoint matches the original for
    // the next 100 environment steps, including every update.
    let mut original = Trainer::load(&a.checkpoint).unwrap();
    let mid = dir.path().join("mid.bin");
    original.save(&mid).unwrap();
    let mut resumed = Trainer::load(&mid).unwrap();
    let mut resume_equal = true;
    for _ in 0..100 {
        original.round().unwrap();
        resumed.round().unwrap();
        resume_equal &= original.to_checkpoint().to_bytes() == resumed.to_checkpoint().to_bytes();
    }
    let elapsed = start.elapsed();
    let passed = streams_equal && checkpoints_equal && resume_equal && elapsed < Duration::from_secs(300);
    report(
        10,
        passed,
        &format!(
            "metrics identical: {streams_equal}, checkpoints identical: {checkpoints_equal}, 100 resumed steps identical: {resume_equal}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}
