use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coxq::harness::config::TrainConfig;
use coxq::harness::metrics::read_metrics;
use coxq::harness::plot::emit_plots;
use coxq::harness::trainer::{run_eval, run_train};
use coxq::harness::verify::{run_verify, Suite};
use coxq::CoxqError;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY_FAILED: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "coxq", version, about = "Safe off-policy RL with cost-constrained optimistic exploration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, plots-ready streams and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the exploration shift (plain stochastic policy).
        #[arg(long)]
        no_cox: bool,
        /// Override run.total_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate the deterministic policy stored in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an oracle-equivalence suite: lemma1, lemma2, bounds, gradients,
    /// quantiles, or all.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts from a metrics.jsonl stream.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Episode cost limit line; read from a sibling config.toml when omitted.
        #[arg(long)]
        cost_limit: Option<f64>,
    },
}

fn exit_for(err: &CoxqError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        CoxqError::NumericDivergence(_) => ExitCode::from(EXIT_DIVERGED),
        _ => ExitCode::from(EXIT_USAGE),
    }
}

fn train(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    no_cox: bool,
    steps: Option<u64>,
) -> coxq::Result<()> {
    let mut cfg = TrainConfig::from_file(&config)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    if no_cox {
        cfg.run.cox = false;
    }
    if let Some(steps) = steps {
        cfg.run.total_steps = steps;
    }
    cfg.validate()?;
    let outcome = run_train(cfg)?;
    if let Some(eval) = &outcome.final_eval {
        println!(
            "final eval: mean return {:.4}, mean cost {:.3}, violation rate {:.3}",
            eval.mean_return, eval.mean_cost, eval.violation_rate
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn verify(suite: &str, cases: usize, tol: Option<f64>, seed: u64) -> coxq::Result<bool> {
    let suites = if suite.eq_ignore_ascii_case("all") {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse::<Suite>()?]
    };
    let mut all_passed = true;
    for s in suites {
        let report = run_verify(s, cases, seed, tol)?;
        print!("{report}");
        all_passed &= report.passed();
    }
    Ok(all_passed)
}

fn plot(metrics: PathBuf, out: PathBuf, cost_limit: Option<f64>) -> coxq::Result<()> {
    let records = read_metrics(&metrics)?;
    let limit = cost_limit.or_else(|| {
        let sibling = metrics.with_file_name("config.toml");
        TrainConfig::from_file(&sibling).ok().map(|c| c.constraint.episode_cost_limit)
    });
    for path in emit_plots(&records, &out, limit)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            no_cox,
            steps,
        } => train(config, seed, out, no_cox, steps),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => run_eval(&checkpoint, episodes, seed).map(|summary| {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }),
        Command::Verify { suite, cases, tol, seed } => match verify(&suite, cases, tol, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VERIFY_FAILED),
            Err(e) => Err(e),
        },
        Command::Plot {
            metrics,
            out,
            cost_limit,
        } => plot(metrics, out, cost_limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
