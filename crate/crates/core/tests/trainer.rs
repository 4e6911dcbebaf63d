use coxq::harness::checkpoint::Checkpoint;
use coxq::harness::config::TrainConfig;
use coxq::harness::metrics::{read_metrics, to_jsonl};
use coxq::harness::trainer::{run_eval, run_train, Trainer};
use coxq::CoxqError;

fn small_config(out: &std::path::Path) -> TrainConfig {
    let text = format!(
        r#"
[run]
seed = 5
total_steps = 1600
out_dir = "{}"
log_interval = 400
eval_interval = 800
eval_episodes = 2
bias_states = 2
bias_rollouts = 4
bias_horizon = 30

[agent]
batch_size = 16
initial_steps = 500
buffer_size = 4000
policy_hidden = [8]
critic_hidden = [8]

[critic]
n_reward_critics = 2
n_cost_critics = 2
n_quantiles = 4
k_r = 1
k_c = 1
cvar_alpha = 2
"#,
        out.display()
    );
    TrainConfig::from_toml_str(&text).unwrap()
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_train(small_config(dir.path())).unwrap();
    let first_metrics = std::fs::read(a.out_dir.join("metrics.jsonl")).unwrap();
    let first_checkpoint = std::fs::read(&a.checkpoint).unwrap();
    let b = run_train(small_config(dir.path())).unwrap();
    assert_eq!(first_metrics, std::fs::read(b.out_dir.join("metrics.jsonl")).unwrap());
    assert_eq!(first_checkpoint, std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(a.records.len(), 4);
    assert!(a.records[1].eval_return.is_some() && a.records[0].eval_return.is_none());
    assert!(a.records[1].cost_bias.is_some());

    let mut other = small_config(&dir.path().join("c"));
    other.run.seed = 6;
    let c = run_train(other).unwrap();
    assert_ne!(to_jsonl(&a.records), to_jsonl(&c.records));
}

#[test]
fn resume_from_checkpoint_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(small_config(dir.path())).unwrap();
    trainer.run_until(700, None).unwrap();
    let path = dir.path().join("mid.bin");
    trainer.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.to_checkpoint(), trainer.to_checkpoint());
    for _ in 0..100 {
        trainer.round().unwrap();
        resumed.round().unwrap();
    }
    assert_eq!(resumed.env_steps, 800);
    assert_eq!(resumed.to_checkpoint().to_bytes(), trainer.to_checkpoint().to_bytes());
}

#[test]
fn run_with_only_warmup_steps_makes_no_updates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.run.total_steps = cfg.agent.initial_steps;
    let mut trainer = Trainer::new(cfg).unwrap();
    let before = trainer.learner.policy.net.clone();
    trainer.run_until(500, None).unwrap();
    assert_eq!(trainer.grad_steps, 0);
    assert_eq!(trainer.buffer.len(), 500);
    assert_eq!(trainer.learner.policy.net, before);
}

#[test]
fn untrained_policy_barely_moves() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_train({
        let mut c = small_config(dir.path());
        c.run.total_steps = 1;
        c
    })
    .unwrap();
    let summary = run_eval(&out.checkpoint, 5, 0).unwrap();
    assert_eq!(summary.episodes, 5);
    // A near-zero initial mean keeps the velocity far below the threshold.
    assert!(summary.mean_return.abs() < 0.5, "{summary:?}");
    assert_eq!(summary.mean_cost, 0.0);
    assert_eq!(run_eval(&out.checkpoint, 5, 0).unwrap(), summary);
    let empty = run_eval(&out.checkpoint, 0, 0).unwrap();
    assert_eq!(empty.episodes, 0);
    assert!(empty.records.is_empty());
}

#[test]
fn metrics_on_disk_match_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_train(small_config(dir.path())).unwrap();
    assert_eq!(read_metrics(&out.out_dir.join("metrics.jsonl")).unwrap(), {
        let mut r = out.records.clone();
        r.iter_mut().for_each(|x| x.wall_time = 0.0);
        r
    });
    let csv = std::fs::read_to_string(out.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), out.records.len() + 1);
    let echoed = TrainConfig::from_file(&out.out_dir.join("config.toml")).unwrap();
    assert_eq!(echoed, small_config(dir.path()));
    assert!(!dir.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn incomplete_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    let mut broken = Checkpoint::new();
    broken.put_bytes("config", small_config(dir.path()).to_toml_string().as_bytes());
    broken.save(&path).unwrap();
    assert!(matches!(run_eval(&path, 1, 0), Err(CoxqError::Checkpoint(_))));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(run_eval(&path, 1, 0), Err(CoxqError::Checkpoint(_))));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(matches!(TrainConfig::from_toml_str("[run]\nbogus = 1\n"), Err(CoxqError::Config(_))));
    assert!(matches!(
        TrainConfig::from_toml_str("[critic]\nn_quantiles = 4\ncvar_alpha = 9\n"),
        Err(CoxqError::Config(_))
    ));
    assert!(TrainConfig::from_toml_str("").is_ok());
}
