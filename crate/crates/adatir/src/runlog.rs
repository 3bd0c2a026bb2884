//! Run artifacts: JSONL step logs, policy checkpoints, conformance vectors
//! and CSV exports. Everything is plain text and deterministic so two runs
//! with the same config and seed produce byte-identical files.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{
    cas_advantage, naive_shaped_advantage, vanilla_advantage, AdvantageBundle, Group, Method,
    ShapingConfig, Trajectory,
};
use crate::config::ExperimentConfig;
use crate::env::PolicyParams;
use crate::metrics::EvalReport;
use crate::trainer::StepStats;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (reader supports up to {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("checkpoint/config mismatch: {0}")]
    Incompatible(String),
    #[error("conformance mismatch on line {line}: {detail}")]
    ConformanceMismatch { line: usize, detail: String },
    #[error(transparent)]
    Advantage(#[from] crate::advantage::AdvantageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// First line of every step log: provenance for the run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    /// Bucket-center threshold used for the easy/hard log labels.
    pub easy_below: f64,
    pub config: ExperimentConfig,
}

/// One step of training, flattened for plotting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub method: Method,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub acc_easy: Option<f64>,
    pub acc_hard: Option<f64>,
    pub atc_easy: Option<f64>,
    pub atc_hard: Option<f64>,
    pub adv_min: f64,
    pub adv_max: f64,
}

impl StepRecord {
    /// Aggregate per-bucket stats into easy/hard labels: a bucket is easy
    /// when its center (b + 0.5) / num_buckets falls below `easy_below`.
    pub fn from_stats(
        stats: &StepStats,
        method: Method,
        num_buckets: usize,
        easy_below: f64,
    ) -> Self {
        let mut easy = (0usize, 0.0f64, 0.0f64);
        let mut hard = (0usize, 0.0f64, 0.0f64);
        for b in &stats.buckets {
            let center = (b.bucket as f64 + 0.5) / num_buckets as f64;
            let slot = if center < easy_below { &mut easy } else { &mut hard };
            slot.0 += b.count;
            slot.1 += b.accuracy * b.count as f64;
            slot.2 += b.mean_tool_calls * b.count as f64;
        }
        let ratio = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        Self {
            step: stats.step,
            method,
            mean_reward: stats.mean_reward,
            grad_norm: stats.grad_norm,
            acc_easy: ratio(easy.1, easy.0),
            acc_hard: ratio(hard.1, hard.0),
            atc_easy: ratio(easy.2, easy.0),
            atc_hard: ratio(hard.2, hard.0),
            adv_min: stats.adv_min,
            adv_max: stats.adv_max,
        }
    }
}

/// Abort marker appended when training dies on a non-finite gradient.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AbortRecord {
    pub abort: bool,
    pub step: usize,
    pub method: Method,
    pub diagnostic: String,
}

pub fn write_step_log(
    path: &Path,
    meta: &MetaRecord,
    steps: &[StepRecord],
    abort: Option<&AbortRecord>,
) -> Result<(), LogError> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(meta)?);
    out.push('\n');
    for rec in steps {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    if let Some(abort) = abort {
        out.push_str(&serde_json::to_string(abort)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Human-readable policy checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub num_buckets: usize,
    pub n_max: u32,
    /// Row-major [num_buckets x (n_max + 1)] logits.
    pub logits: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams, seed: u64, config_hash: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            num_buckets: params.num_buckets,
            n_max: params.n_max,
            logits: params.logits.clone(),
            seed,
            config_hash,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.schema_version > SCHEMA_VERSION {
            return Err(LogError::SchemaVersion {
                found: ckpt.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(ckpt)
    }

    pub fn to_params(&self, expected_buckets: usize, expected_n_max: u32) -> Result<PolicyParams, LogError> {
        if self.num_buckets != expected_buckets || self.n_max != expected_n_max {
            return Err(LogError::Incompatible(format!(
                "checkpoint has {} buckets / n_max {}, config expects {} / {}",
                self.num_buckets, self.n_max, expected_buckets, expected_n_max
            )));
        }
        if self.logits.len() != self.num_buckets * (self.n_max as usize + 1) {
            return Err(LogError::Incompatible("logits length mismatch".into()));
        }
        Ok(PolicyParams {
            num_buckets: self.num_buckets,
            n_max: self.n_max,
            logits: self.logits.clone(),
        })
    }
}

/// One conformance vector: group inputs plus the expected advantage bundle
/// under each method, for cross-implementation checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConformanceRecord {
    pub schema_version: u32,
    pub shaping: ShapingConfig,
    pub task_id: u64,
    pub tool_calls: Vec<u32>,
    pub correct: Vec<bool>,
    pub vanilla: AdvantageBundle,
    pub naive_shaping: AdvantageBundle,
    pub cas: AdvantageBundle,
}

impl ConformanceRecord {
    pub fn compute(group: &Group, shaping: &ShapingConfig) -> Result<Self, LogError> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            shaping: shaping.clone(),
            task_id: group.task_id(),
            tool_calls: group.trajectories().iter().map(|t| t.tool_calls).collect(),
            correct: group.trajectories().iter().map(|t| t.correct).collect(),
            vanilla: vanilla_advantage(group, shaping)?,
            naive_shaping: naive_shaped_advantage(group, shaping)?,
            cas: cas_advantage(group, shaping)?,
        })
    }

    fn rebuild_group(&self) -> Result<Group, LogError> {
        let trajectories = self
            .tool_calls
            .iter()
            .zip(&self.correct)
            .map(|(&tool_calls, &correct)| Trajectory {
                tool_calls,
                correct,
                action_logprob: 0.0,
                task_id: self.task_id,
            })
            .collect();
        Ok(Group::new(trajectories)?)
    }
}

pub fn write_conformance(path: &Path, records: &[ConformanceRecord]) -> Result<(), LogError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Re-run the advantage computations on stored vectors and demand exact
/// (bit-for-bit after JSON round-trip) agreement. Returns the line count.
pub fn verify_conformance(path: &Path) -> Result<usize, LogError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let mut checked = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConformanceRecord = serde_json::from_str(&line)?;
        if rec.schema_version > SCHEMA_VERSION {
            return Err(LogError::SchemaVersion {
                found: rec.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let group = rec.rebuild_group()?;
        let recomputed = ConformanceRecord::compute(&group, &rec.shaping)?;
        for (name, got, want) in [
            ("vanilla", &recomputed.vanilla, &rec.vanilla),
            ("naive_shaping", &recomputed.naive_shaping, &rec.naive_shaping),
            ("cas", &recomputed.cas, &rec.cas),
        ] {
            if got != want {
                return Err(LogError::ConformanceMismatch {
                    line: idx + 1,
                    detail: format!("{name} bundle differs"),
                });
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// Budget sweep CSV: header then one row per budget.
pub fn write_budget_csv(path: &Path, report: &EvalReport) -> Result<(), LogError> {
    let mut out = String::from("budget,accuracy,atc\n");
    for p in &report.budget_curve {
        out.push_str(&format!("{},{},{}\n", p.budget, p.accuracy, p.atc));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Ablation comparison CSV, one row per (method, bucket) plus an overall
/// row per method. TP column is empty when undefined.
pub fn write_comparison_csv(
    path: &Path,
    rows: &[(Method, EvalReport)],
) -> Result<(), LogError> {
    let mut out = String::from("method,bucket,accuracy,atc,tp\n");
    for (method, report) in rows {
        let tp = report.tp.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},overall,{},{},{}\n",
            method, report.accuracy, report.atc, tp
        ));
        for b in &report.per_bucket {
            let tp = crate::metrics::tool_productivity(b.accuracy * 100.0, b.atc)
                .ok()
                .flatten()
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                method, b.bucket, b.accuracy, b.atc, tp
            ));
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<(), LogError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    let text = serde_json::to_string_pretty(report)?;
    writeln!(file, "{text}").map_err(io_err(path))
}
