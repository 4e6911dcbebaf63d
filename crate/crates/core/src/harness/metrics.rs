//! Metrics stream: one JSON object per line plus a flat CSV export.
//!
//! Wall-clock time is kept out of both files so that seeded runs produce
//! byte-identical streams; it goes to a separate `wall_time.csv`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoxqError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub critic_reward: f64,
    pub critic_cost: f64,
    pub actor: f64,
}

/// Summary of one logging interval. Optional fields are `null` when nothing
/// was measured in the interval (no finished episode, no evaluation).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean undiscounted return of training episodes finished in the interval.
    pub episode_return: Option<f64>,
    pub episode_cost: Option<f64>,
    pub episodes: u64,
    pub eval_return: Option<f64>,
    pub eval_cost: Option<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub alpha_ent: f64,
    /// Fraction of unsafe-branch exploration calls whose gradients conflicted.
    pub conflict_ratio: f64,
    pub eta_star_mean: f64,
    /// Fraction of exploration calls that took the unsafe branch.
    pub unsafe_ratio: f64,
    /// Mean over updates of the batch-mean cost upper bound seen by the actor.
    pub batch_cost_ub: f64,
    /// Mean signed critic-minus-oracle cost value over the bias states.
    pub cost_bias: Option<f64>,
    /// Mean absolute critic-minus-oracle cost value.
    pub cost_bias_abs: Option<f64>,
    /// Mean oracle cost value over the same states.
    pub oracle_cost: Option<f64>,
    pub losses: Losses,
    #[serde(skip)]
    pub wall_time: f64,
}

pub const CSV_HEADER: &str = "step,episode_return,episode_cost,episodes,eval_return,eval_cost,lambda,delta,alpha_ent,\
conflict_ratio,eta_star_mean,unsafe_ratio,batch_cost_ub,cost_bias,cost_bias_abs,oracle_cost,loss_critic_reward,loss_critic_cost,loss_actor";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            opt(self.episode_return),
            opt(self.episode_cost),
            self.episodes,
            opt(self.eval_return),
            opt(self.eval_cost),
            self.lambda,
            self.delta,
            self.alpha_ent,
            self.conflict_ratio,
            self.eta_star_mean,
            self.unsafe_ratio,
            self.batch_cost_ub,
            opt(self.cost_bias),
            opt(self.cost_bias_abs),
            opt(self.oracle_cost),
            self.losses.critic_reward,
            self.losses.critic_cost,
            self.losses.actor
        )
    }
}

/// Replaces `path` with `bytes` via a sibling temporary file and a rename, so
/// readers only ever observe complete files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Rewrites `metrics.jsonl`, `metrics.csv` and `wall_time.csv` in `dir`.
pub fn flush_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(&dir.join("metrics.jsonl"), to_jsonl(records).as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), to_csv(records).as_bytes())?;
    let mut wall = String::from("step,wall_time\n");
    for r in records {
        let _ = writeln!(wall, "{},{:.3}", r.step, r.wall_time);
    }
    write_atomic(&dir.join("wall_time.csv"), wall.as_bytes())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let mut last_step = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| CoxqError::Metrics {
            line: i + 1,
            message: e.to_string(),
        })?;
        if last_step.is_some_and(|s| rec.step < s) {
            return Err(CoxqError::Metrics {
                line: i + 1,
                message: format!("step {} goes backwards", rec.step),
            });
        }
        last_step = Some(rec.step);
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_drops_wall_time() {
        let recs = vec![
            MetricsRecord {
                step: 10,
                episode_return: Some(1.5),
                wall_time: 3.0,
                ..Default::default()
            },
            MetricsRecord {
                step: 20,
                cost_bias: Some(-0.25),
                ..Default::default()
            },
        ];
        let back = parse_jsonl(&to_jsonl(&recs)).unwrap();
        assert_eq!(back[0].episode_return, Some(1.5));
        assert_eq!(back[0].wall_time, 0.0);
        assert_eq!(back[1].cost_bias, Some(-0.25));
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = "{\"step\":1}\nnot json\n";
        match parse_jsonl(text) {
            Err(CoxqError::Metrics { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_has_one_column_per_header() {
        let row = MetricsRecord::default().csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}
