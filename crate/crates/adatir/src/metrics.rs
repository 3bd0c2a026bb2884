//! Evaluation metrics: accuracy, Average Tool Calls, Tool Productivity,
//! per-bucket breakdowns and the budget-sensitivity sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{derive_rng, sample_task, EnvConfig, EnvError, PolicyParams};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("accuracy and atc must be nonnegative")]
    NegativeInput,
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketEval {
    pub bucket: usize,
    pub count: usize,
    pub accuracy: f64,
    pub atc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BudgetPoint {
    pub budget: u32,
    pub accuracy: f64,
    pub atc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub atc: f64,
    /// Accuracy in percent divided by ATC; absent when no tools were used.
    pub tp: Option<f64>,
    pub per_bucket: Vec<BucketEval>,
    pub budget_curve: Vec<BudgetPoint>,
    pub n_eval: usize,
}

/// Tool Productivity: accuracy in percent per tool call. Undefined at
/// atc = 0, reported as None so aggregates can skip it.
pub fn tool_productivity(accuracy_percent: f64, atc: f64) -> Result<Option<f64>, MetricsError> {
    if accuracy_percent < 0.0 || atc < 0.0 {
        return Err(MetricsError::NegativeInput);
    }
    if atc > 0.0 {
        Ok(Some(accuracy_percent / atc))
    } else {
        Ok(None)
    }
}

struct CellStats {
    accuracy: f64,
    atc: f64,
    per_bucket: Vec<BucketEval>,
}

fn eval_cell(
    params: &PolicyParams,
    env: &EnvConfig,
    n_eval: usize,
    budget_cap: Option<u32>,
    seed: u64,
    stream: u64,
) -> Result<CellStats, MetricsError> {
    let mut rng = derive_rng(seed, stream, 0);
    let mut counts = vec![0usize; env.num_buckets];
    let mut correct = vec![0usize; env.num_buckets];
    let mut tools = vec![0u64; env.num_buckets];
    for i in 0..n_eval {
        let task = sample_task(&env.distribution, env.num_buckets, i as u64, &mut rng)?;
        let (k, _) = params.sample_action(task.bucket, &mut rng)?;
        let effective_k = budget_cap.map_or(k, |cap| k.min(cap));
        let p = env.success.p_correct(task.difficulty, effective_k);
        let is_correct = rand::Rng::gen::<f64>(&mut rng) < p;
        counts[task.bucket] += 1;
        correct[task.bucket] += is_correct as usize;
        tools[task.bucket] += u64::from(effective_k);
    }
    let total = n_eval.max(1) as f64;
    let per_bucket = (0..env.num_buckets)
        .filter(|&b| counts[b] > 0)
        .map(|b| BucketEval {
            bucket: b,
            count: counts[b],
            accuracy: correct[b] as f64 / counts[b] as f64,
            atc: tools[b] as f64 / counts[b] as f64,
        })
        .collect();
    Ok(CellStats {
        accuracy: correct.iter().sum::<usize>() as f64 / total,
        atc: tools.iter().sum::<u64>() as f64 / total,
        per_bucket,
    })
}

/// Evaluate a policy. With `sweep`, additionally fills the budget curve for
/// every cap B in {0..n_max}; the headline numbers use `budget_cap`.
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvConfig,
    n_eval: usize,
    budget_cap: Option<u32>,
    sweep: bool,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let main = eval_cell(params, env, n_eval, budget_cap, seed, 101)?;
    let mut budget_curve = Vec::new();
    if sweep {
        for budget in 0..=params.n_max {
            let cell = eval_cell(params, env, n_eval, Some(budget), seed, 200 + u64::from(budget))?;
            budget_curve.push(BudgetPoint {
                budget,
                accuracy: cell.accuracy,
                atc: cell.atc,
            });
        }
    }
    let tp = tool_productivity(main.accuracy * 100.0, main.atc)?;
    Ok(EvalReport {
        accuracy: main.accuracy,
        atc: main.atc,
        tp,
        per_bucket: main.per_bucket,
        budget_curve,
        n_eval,
    })
}
