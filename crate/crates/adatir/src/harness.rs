//! Command implementations behind the CLI: training runs, the three-way
//! ablation, checkpoint evaluation and the gradient self-check.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::advantage::Method;
use crate::config::{ConfigError, ExperimentConfig};
use crate::env::{derive_rng, PolicyParams};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::runlog::{
    write_budget_csv, write_comparison_csv, write_conformance, write_eval_report, write_step_log,
    AbortRecord, Checkpoint, ConformanceRecord, LogError, MetaRecord, StepRecord, SCHEMA_VERSION,
};
use crate::trainer::{
    compute_bundles, finite_difference_gradient, max_relative_error, sample_batch,
    surrogate_gradient, train, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Advantage(#[from] crate::advantage::AdvantageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training aborted at step {step}: non-finite gradient (see {log})")]
    Aborted { step: usize, log: String },
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })
}

/// Seed for evaluation streams, decoupled from the training stream.
fn eval_seed(train_seed: u64) -> u64 {
    train_seed ^ 0xa5a5_5a5a_e7e7_0001
}

pub struct RunArtifacts {
    pub step_log: PathBuf,
    pub checkpoint: PathBuf,
    pub eval_report: Option<EvalReport>,
}

fn file_suffix(multi_method: bool, method: Method) -> String {
    if multi_method {
        format!("_{method}")
    } else {
        String::new()
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    multi_method: bool,
) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let method = cfg.train.method;
    let config_hash = cfg.hash();
    let suffix = file_suffix(multi_method, method);
    let step_log = out_dir.join(format!("steps{suffix}.jsonl"));
    let ckpt_path = out_dir.join(format!("checkpoint{suffix}.json"));

    let output = train(&cfg.env, &cfg.train, &cfg.shaping)?;
    let meta = MetaRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.clone(),
        method,
        seed: cfg.train.seed,
        easy_below: cfg.easy_split(),
        config: cfg.clone(),
    };
    let records: Vec<StepRecord> = output
        .stats
        .iter()
        .map(|s| StepRecord::from_stats(s, method, cfg.env.num_buckets, cfg.easy_split()))
        .collect();
    let abort = output.abort.as_ref().map(|a| AbortRecord {
        abort: true,
        step: a.step,
        method,
        diagnostic: a.diagnostic.clone(),
    });
    write_step_log(&step_log, &meta, &records, abort.as_ref())?;
    Checkpoint::from_params(&output.params, cfg.train.seed, config_hash).save(&ckpt_path)?;

    if let Some(a) = &output.abort {
        return Err(HarnessError::Aborted {
            step: a.step,
            log: step_log.display().to_string(),
        });
    }

    let report = evaluate(
        &output.params,
        &cfg.env,
        cfg.eval.n_eval,
        None,
        cfg.eval.sweep,
        eval_seed(cfg.train.seed),
    )?;
    write_eval_report(&out_dir.join(format!("eval{suffix}.json")), &report)?;
    Ok(RunArtifacts {
        step_log,
        checkpoint: ckpt_path,
        eval_report: Some(report),
    })
}

/// `run`: train one method, write step log, checkpoint and eval report.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts, HarnessError> {
    run_one(cfg, out_dir, false)
}

/// `ablate`: run the requested methods (default all three) on identical
/// seeds, write one comparison CSV and the conformance vectors.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    only: Option<Method>,
) -> Result<Vec<(Method, EvalReport)>, HarnessError> {
    ensure_dir(out_dir)?;
    let methods: Vec<Method> = match only {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for &method in &methods {
        let mut arm = cfg.clone();
        arm.train.method = method;
        let artifacts = run_one(&arm, out_dir, true)?;
        let report = artifacts.eval_report.expect("non-aborted run has a report");
        rows.push((method, report));
    }
    write_comparison_csv(&out_dir.join("comparison.csv"), &rows)?;
    write_conformance(
        &out_dir.join("conformance.jsonl"),
        &generate_conformance_vectors(cfg, 100)?,
    )?;
    Ok(rows)
}

/// Sample groups from the configured environment under the uniform initial
/// policy and record expected bundles for every method.
pub fn generate_conformance_vectors(
    cfg: &ExperimentConfig,
    count: usize,
) -> Result<Vec<ConformanceRecord>, HarnessError> {
    let params = PolicyParams::uniform(cfg.env.num_buckets, cfg.shaping.n_max);
    let tcfg = TrainConfig {
        batch_tasks: 1,
        ..cfg.train.clone()
    };
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let batch = sample_batch(&cfg.env, &params, &tcfg, i)?;
        records.push(ConformanceRecord::compute(&batch.groups[0], &cfg.shaping)?);
    }
    Ok(records)
}

/// `eval`: load a checkpoint, evaluate under an optional budget cap or the
/// full budget sweep. Returns the report; the CLI prints it as JSON.
pub fn cmd_eval(
    ckpt_path: &Path,
    cfg: &ExperimentConfig,
    budget: Option<u32>,
    sweep: bool,
    out_dir: &Path,
) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let params = ckpt.to_params(cfg.env.num_buckets, cfg.shaping.n_max)?;
    let report = evaluate(
        &params,
        &cfg.env,
        cfg.eval.n_eval,
        budget,
        sweep,
        eval_seed(ckpt.seed),
    )?;
    if sweep {
        ensure_dir(out_dir)?;
        write_budget_csv(&out_dir.join("budget_curve.csv"), &report)?;
    }
    Ok(report)
}

/// `check-grad`: compare analytic and finite-difference gradients on
/// `trials` random parameter draws; returns the max relative error.
/// `corruption` perturbs the analytic gradient and exists as a negative
/// control for the check itself.
pub fn cmd_check_grad(
    cfg: &ExperimentConfig,
    trials: usize,
    corruption: f64,
) -> Result<f64, HarnessError> {
    cfg.validate()?;
    let mut max_err = 0.0f64;
    for trial in 0..trials {
        let mut params = PolicyParams::uniform(cfg.env.num_buckets, cfg.shaping.n_max);
        let mut rng = derive_rng(cfg.train.seed, 7, trial as u64);
        for l in params.logits.iter_mut() {
            *l = rand::Rng::gen_range(&mut rng, -2.0..2.0);
        }
        let batch = sample_batch(&cfg.env, &params, &cfg.train, trial)?;
        let bundles = compute_bundles(cfg.train.method, &batch, &cfg.shaping)?;
        let mut analytic = surrogate_gradient(&batch, &bundles, &params, &params, &cfg.train)?;
        if corruption != 0.0 {
            if let Some(first) = analytic.first_mut() {
                *first += corruption;
            }
        }
        let numeric = finite_difference_gradient(&batch, &bundles, &params, &cfg.train)?;
        max_err = max_err.max(max_relative_error(&analytic, &numeric));
    }
    Ok(max_err)
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;
