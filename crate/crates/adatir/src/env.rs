//! Synthetic tool-integrated-reasoning environment.
//!
//! Tasks carry a latent difficulty in [0, 1]; the policy only observes a
//! coarse bucket label and picks a tool budget k. Success probability is
//! `clamp((1 - d) + d * rho * (1 - exp(-k)), 0, 1)`: tools raise the
//! success rate of hard tasks and are useless at d = 0.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{Group, Trajectory};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("task distribution must contain at least one mode")]
    EmptyMixture,
    #[error("mixture weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("bucket {bucket} out of range (num_buckets = {num_buckets})")]
    BucketOutOfRange { bucket: usize, num_buckets: usize },
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
}

/// One task instance as seen by the rollout loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub difficulty: f64,
    pub bucket: usize,
    pub task_id: u64,
}

/// Parametric success model; `rho` is the tool gain on fully hard tasks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessModel {
    pub rho: f64,
}

impl Default for SuccessModel {
    fn default() -> Self {
        Self { rho: 0.9 }
    }
}

impl SuccessModel {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(EnvError::InvalidConfig("rho must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn p_correct(&self, difficulty: f64, tool_calls: u32) -> f64 {
        let base = 1.0 - difficulty;
        let gain = difficulty * self.rho * (1.0 - (-f64::from(tool_calls)).exp());
        (base + gain).clamp(0.0, 1.0)
    }
}

/// One mode of the task-difficulty mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DifficultyMode {
    pub center: f64,
    pub weight: f64,
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDistribution {
    pub modes: Vec<DifficultyMode>,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        Self {
            modes: vec![
                DifficultyMode {
                    center: 0.1,
                    weight: 0.6,
                    spread: 0.0,
                },
                DifficultyMode {
                    center: 0.8,
                    weight: 0.4,
                    spread: 0.0,
                },
            ],
        }
    }
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.modes.is_empty() {
            return Err(EnvError::EmptyMixture);
        }
        let sum: f64 = self.modes.iter().map(|m| m.weight).sum();
        if self.modes.iter().any(|m| m.weight < 0.0) || !(sum > 0.0) {
            return Err(EnvError::BadWeights);
        }
        for m in &self.modes {
            if !(0.0..=1.0).contains(&m.center) || m.spread < 0.0 {
                return Err(EnvError::InvalidConfig(
                    "mode centers must be in [0, 1] and spreads nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    fn sample_difficulty(&self, rng: &mut impl Rng) -> f64 {
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut mode = &self.modes[self.modes.len() - 1];
        for m in &self.modes {
            if u < m.weight {
                mode = m;
                break;
            }
            u -= m.weight;
        }
        let d = if mode.spread > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            mode.center + mode.spread * z
        } else {
            mode.center
        };
        d.clamp(0.0, 1.0)
    }
}

/// Environment settings shared by trainer and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_buckets: usize,
    pub distribution: TaskDistribution,
    pub success: SuccessModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_buckets: 2,
            distribution: TaskDistribution::default(),
            success: SuccessModel::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_buckets < 1 {
            return Err(EnvError::InvalidConfig("num_buckets must be >= 1".into()));
        }
        self.distribution.validate()?;
        self.success.validate()
    }
}

/// Categorical policy over tool budgets {0..n_max}, one row per bucket.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyParams {
    pub num_buckets: usize,
    pub n_max: u32,
    /// Row-major [num_buckets x (n_max + 1)] logits.
    pub logits: Vec<f64>,
}

impl PolicyParams {
    pub fn uniform(num_buckets: usize, n_max: u32) -> Self {
        Self {
            num_buckets,
            n_max,
            logits: vec![0.0; num_buckets * (n_max as usize + 1)],
        }
    }

    pub fn num_actions(&self) -> usize {
        self.n_max as usize + 1
    }

    pub fn row(&self, bucket: usize) -> Result<&[f64], EnvError> {
        if bucket >= self.num_buckets {
            return Err(EnvError::BucketOutOfRange {
                bucket,
                num_buckets: self.num_buckets,
            });
        }
        let w = self.num_actions();
        Ok(&self.logits[bucket * w..(bucket + 1) * w])
    }

    pub fn log_softmax_row(&self, bucket: usize) -> Result<Vec<f64>, EnvError> {
        let row = self.row(bucket)?;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        Ok(row.iter().map(|l| l - log_z).collect())
    }

    pub fn probs_row(&self, bucket: usize) -> Result<Vec<f64>, EnvError> {
        Ok(self
            .log_softmax_row(bucket)?
            .iter()
            .map(|lp| lp.exp())
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
    }

    /// Sample a tool budget for a bucket; returns (k, log pi(k | bucket)).
    pub fn sample_action(
        &self,
        bucket: usize,
        rng: &mut impl Rng,
    ) -> Result<(u32, f64), EnvError> {
        let log_probs = self.log_softmax_row(bucket)?;
        let u = rng.gen::<f64>();
        let mut acc = 0.0;
        let mut k = log_probs.len() - 1;
        for (i, lp) in log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        Ok((k as u32, log_probs[k]))
    }
}

/// Deterministic per-(seed, stream, index) generator so groups own
/// independent streams regardless of evaluation order.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15)) ^ index))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn sample_task(
    dist: &TaskDistribution,
    num_buckets: usize,
    task_id: u64,
    rng: &mut impl Rng,
) -> Result<TaskSpec, EnvError> {
    dist.validate()?;
    let difficulty = dist.sample_difficulty(rng);
    let bucket = ((difficulty * num_buckets as f64) as usize).min(num_buckets - 1);
    Ok(TaskSpec {
        difficulty,
        bucket,
        task_id,
    })
}

/// Sample G independent trajectories for one task. `budget_cap` truncates
/// the executed tool calls (evaluation-only mechanism); the recorded
/// logprob always refers to the untruncated sampled action.
pub fn rollout_group(
    task: &TaskSpec,
    params: &PolicyParams,
    model: &SuccessModel,
    group_size: usize,
    budget_cap: Option<u32>,
    rng: &mut impl Rng,
) -> Result<Group, EnvError> {
    if group_size < 2 {
        return Err(EnvError::InvalidConfig(
            "group size must be at least 2".into(),
        ));
    }
    let mut trajectories = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let (k, logprob) = params.sample_action(task.bucket, rng)?;
        let effective_k = budget_cap.map_or(k, |cap| k.min(cap));
        let p = model.p_correct(task.difficulty, effective_k);
        let correct = rng.gen::<f64>() < p;
        trajectories.push(Trajectory {
            tool_calls: effective_k,
            correct,
            action_logprob: logprob,
            task_id: task.task_id,
        });
    }
    Ok(Group::new(trajectories).expect("group_size >= 2 with a single task id"))
}
