//! Group-relative policy-gradient trainer.
//!
//! One action per trajectory, so the clipped surrogate reduces to
//!
//!   (1/B) sum_groups (1/G) sum_i min(r_i * A_i, clip(r_i, 1-eps_l, 1+eps_h) * A_i)
//!     - kl_coeff * KL(pi_new(.|b_i) || pi_ref(.|b_i))
//!
//! with r_i = pi_new(k_i | b_i) / pi_old(k_i | b_i). Updates are plain
//! gradient ascent; a central finite-difference oracle checks the analytic
//! gradient coordinate by coordinate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{
    compute_bundle, efficiency_reward, estimate_difficulty, AdvantageBundle, AdvantageError,
    Group, Method, ShapingConfig,
};
use crate::env::{derive_rng, rollout_group, sample_task, EnvConfig, EnvError, PolicyParams, TaskSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error("batch shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub group_size: usize,
    pub batch_tasks: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub inner_epochs: usize,
    pub kl_coeff: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Cas,
            group_size: 16,
            batch_tasks: 8,
            steps: 200,
            learning_rate: 0.05,
            clip_low: 0.2,
            clip_high: 0.28,
            inner_epochs: 1,
            kl_coeff: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return err("group_size must be at least 2");
        }
        if self.batch_tasks < 1 {
            return err("batch_tasks must be at least 1");
        }
        if !(self.clip_low > 0.0 && self.clip_high > 0.0) {
            return err("clip_low and clip_high must be positive");
        }
        if self.inner_epochs < 1 {
            return err("inner_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return err("learning_rate must be positive");
        }
        if self.kl_coeff < 0.0 {
            return err("kl_coeff must be nonnegative");
        }
        Ok(())
    }
}

/// Per-bucket rollout statistics for one step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketStat {
    pub bucket: usize,
    pub count: usize,
    pub accuracy: f64,
    pub mean_tool_calls: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub buckets: Vec<BucketStat>,
    pub adv_min: f64,
    pub adv_max: f64,
}

/// A fixed batch of rollouts: tasks aligned 1:1 with groups.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub tasks: Vec<TaskSpec>,
    pub groups: Vec<Group>,
}

/// Diagnostic record produced when a step yields a non-finite gradient.
/// Training stops at that step instead of clamping silently.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AbortInfo {
    pub step: usize,
    pub diagnostic: String,
}

pub struct TrainOutput {
    pub params: PolicyParams,
    pub stats: Vec<StepStats>,
    pub abort: Option<AbortInfo>,
}

fn check_alignment(batch: &RolloutBatch, bundles: &[AdvantageBundle]) -> Result<(), TrainError> {
    if batch.tasks.len() != batch.groups.len() || batch.groups.len() != bundles.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} tasks, {} groups, {} bundles",
            batch.tasks.len(),
            batch.groups.len(),
            bundles.len()
        )));
    }
    for (g, b) in batch.groups.iter().zip(bundles) {
        if g.len() != b.a_final.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "group of {} trajectories with {} advantages",
                g.len(),
                b.a_final.len()
            )));
        }
    }
    Ok(())
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Value of the clipped surrogate objective (to be maximized).
pub fn surrogate_objective(
    batch: &RolloutBatch,
    bundles: &[AdvantageBundle],
    params_new: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    check_alignment(batch, bundles)?;
    let mut total = 0.0;
    for ((task, group), bundle) in batch.tasks.iter().zip(&batch.groups).zip(bundles) {
        let log_probs = params_new.log_softmax_row(task.bucket)?;
        let kl_term = if cfg.kl_coeff > 0.0 {
            let p = params_new.probs_row(task.bucket)?;
            let q = params_ref.probs_row(task.bucket)?;
            cfg.kl_coeff * kl_divergence(&p, &q)
        } else {
            0.0
        };
        let mut group_sum = 0.0;
        for (traj, &adv) in group.trajectories().iter().zip(&bundle.a_final) {
            let ratio = (log_probs[traj.tool_calls as usize] - traj.action_logprob).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high) * adv;
            group_sum += unclipped.min(clipped) - kl_term;
        }
        total += group_sum / group.len() as f64;
    }
    Ok(total / batch.groups.len() as f64)
}

/// Analytic gradient of `surrogate_objective` with respect to the logits.
pub fn surrogate_gradient(
    batch: &RolloutBatch,
    bundles: &[AdvantageBundle],
    params_new: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    check_alignment(batch, bundles)?;
    let width = params_new.num_actions();
    let mut grad = vec![0.0; params_new.logits.len()];
    let batch_scale = 1.0 / batch.groups.len() as f64;
    for ((task, group), bundle) in batch.tasks.iter().zip(&batch.groups).zip(bundles) {
        let log_probs = params_new.log_softmax_row(task.bucket)?;
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let row_offset = task.bucket * width;
        let scale = batch_scale / group.len() as f64;

        // KL gradient: d/d theta_m  p_m (log(p_m / q_m) - KL)
        if cfg.kl_coeff > 0.0 {
            let q = params_ref.probs_row(task.bucket)?;
            let kl = kl_divergence(&probs, &q);
            for m in 0..width {
                let l = probs[m].ln() - q[m].ln();
                grad[row_offset + m] -=
                    cfg.kl_coeff * probs[m] * (l - kl) * scale * group.len() as f64;
            }
        }

        for (traj, &adv) in group.trajectories().iter().zip(&bundle.a_final) {
            let k = traj.tool_calls as usize;
            let ratio = (log_probs[k] - traj.action_logprob).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high) * adv;
            // min picks the unclipped branch -> gradient A * r * (one_hot - p);
            // the clipped branch is constant in theta where it binds.
            if unclipped <= clipped {
                let coef = adv * ratio * scale;
                for m in 0..width {
                    let indicator = if m == k { 1.0 } else { 0.0 };
                    grad[row_offset + m] += coef * (indicator - probs[m]);
                }
            }
        }
    }
    Ok(grad)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn collect_stats(
    step: usize,
    batch: &RolloutBatch,
    bundles: &[AdvantageBundle],
    shaping: &ShapingConfig,
    num_buckets: usize,
    grad_norm: f64,
) -> StepStats {
    let mut reward_sum = 0.0;
    let mut n_traj = 0usize;
    let mut adv_min = f64::INFINITY;
    let mut adv_max = f64::NEG_INFINITY;
    let mut counts = vec![0usize; num_buckets];
    let mut correct = vec![0usize; num_buckets];
    let mut tools = vec![0u64; num_buckets];
    for ((task, group), bundle) in batch.tasks.iter().zip(&batch.groups).zip(bundles) {
        let phi = estimate_difficulty(group);
        for (traj, &adv) in group.trajectories().iter().zip(&bundle.a_final) {
            let r_eff = efficiency_reward(traj, phi, shaping).unwrap_or(0.0);
            reward_sum += traj.correct as u32 as f64 + r_eff;
            n_traj += 1;
            adv_min = adv_min.min(adv);
            adv_max = adv_max.max(adv);
            counts[task.bucket] += 1;
            correct[task.bucket] += traj.correct as usize;
            tools[task.bucket] += u64::from(traj.tool_calls);
        }
    }
    let buckets = (0..num_buckets)
        .filter(|&b| counts[b] > 0)
        .map(|b| BucketStat {
            bucket: b,
            count: counts[b],
            accuracy: correct[b] as f64 / counts[b] as f64,
            mean_tool_calls: tools[b] as f64 / counts[b] as f64,
        })
        .collect();
    StepStats {
        step,
        mean_reward: reward_sum / n_traj.max(1) as f64,
        grad_norm,
        buckets,
        adv_min,
        adv_max,
    }
}

/// Sample one training batch: `batch_tasks` tasks, one group each. Task and
/// group RNG streams are derived from (seed, step, index) so the stream is
/// identical regardless of batch evaluation order.
pub fn sample_batch(
    env: &EnvConfig,
    params: &PolicyParams,
    tcfg: &TrainConfig,
    step: usize,
) -> Result<RolloutBatch, TrainError> {
    let mut tasks = Vec::with_capacity(tcfg.batch_tasks);
    let mut groups = Vec::with_capacity(tcfg.batch_tasks);
    for i in 0..tcfg.batch_tasks {
        let task_id = (step * tcfg.batch_tasks + i) as u64;
        let mut task_rng = derive_rng(tcfg.seed, 1, task_id);
        let task = sample_task(&env.distribution, env.num_buckets, task_id, &mut task_rng)?;
        let mut group_rng = derive_rng(tcfg.seed, 2, task_id);
        let group = rollout_group(
            &task,
            params,
            &env.success,
            tcfg.group_size,
            None,
            &mut group_rng,
        )?;
        tasks.push(task);
        groups.push(group);
    }
    Ok(RolloutBatch { tasks, groups })
}

pub fn compute_bundles(
    method: Method,
    batch: &RolloutBatch,
    shaping: &ShapingConfig,
) -> Result<Vec<AdvantageBundle>, AdvantageError> {
    batch
        .groups
        .iter()
        .map(|g| compute_bundle(method, g, shaping))
        .collect()
}

/// Run the full training loop. Deterministic given (configs, seed).
pub fn train(
    env: &EnvConfig,
    tcfg: &TrainConfig,
    shaping: &ShapingConfig,
) -> Result<TrainOutput, TrainError> {
    tcfg.validate()?;
    shaping.validate()?;
    env.validate()?;
    let mut params = PolicyParams::uniform(env.num_buckets, shaping.n_max);
    let params_ref = params.clone();
    let mut stats = Vec::with_capacity(tcfg.steps);
    let mut abort = None;
    'outer: for step in 0..tcfg.steps {
        let batch = sample_batch(env, &params, tcfg, step)?;
        let bundles = compute_bundles(tcfg.method, &batch, shaping)?;
        let mut new_params = params.clone();
        let mut grad_norm = 0.0;
        for _ in 0..tcfg.inner_epochs {
            let grad = surrogate_gradient(&batch, &bundles, &new_params, &params_ref, tcfg)?;
            if grad.iter().any(|g| !g.is_finite()) {
                abort = Some(AbortInfo {
                    step,
                    diagnostic: diagnose_batch(&batch, &bundles),
                });
                break 'outer;
            }
            grad_norm = l2_norm(&grad);
            for (p, g) in new_params.logits.iter_mut().zip(&grad) {
                *p += tcfg.learning_rate * g;
            }
        }
        if !new_params.is_finite() {
            abort = Some(AbortInfo {
                step,
                diagnostic: diagnose_batch(&batch, &bundles),
            });
            break;
        }
        stats.push(collect_stats(
            step,
            &batch,
            &bundles,
            shaping,
            env.num_buckets,
            grad_norm,
        ));
        params = new_params;
    }
    Ok(TrainOutput { params, stats, abort })
}

fn diagnose_batch(batch: &RolloutBatch, bundles: &[AdvantageBundle]) -> String {
    for (group, bundle) in batch.groups.iter().zip(bundles) {
        if bundle.a_final.iter().any(|a| !a.is_finite()) {
            return serde_json::json!({ "group": group, "bundle": bundle }).to_string();
        }
    }
    batch
        .groups
        .first()
        .map(|g| serde_json::json!({ "group": g }).to_string())
        .unwrap_or_else(|| "empty batch".to_string())
}

/// Central finite differences of the surrogate objective, h = 1e-6 per
/// coordinate, at `params_new = params_old = params`.
pub fn finite_difference_gradient(
    batch: &RolloutBatch,
    bundles: &[AdvantageBundle],
    params: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(params.logits.len());
    let mut perturbed = params.clone();
    for i in 0..params.logits.len() {
        perturbed.logits[i] = params.logits[i] + h;
        let up = surrogate_objective(batch, bundles, &perturbed, params, cfg)?;
        perturbed.logits[i] = params.logits[i] - h;
        let down = surrogate_objective(batch, bundles, &perturbed, params, cfg)?;
        perturbed.logits[i] = params.logits[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(numeric)
}

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare the analytic gradient at `params_new = params_old` against the
/// finite-difference oracle.
pub fn check_gradient(
    params: &PolicyParams,
    batch: &RolloutBatch,
    bundles: &[AdvantageBundle],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let analytic = surrogate_gradient(batch, bundles, params, params, cfg)?;
    let numeric = finite_difference_gradient(batch, bundles, params, cfg)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::Trajectory;

    fn single_batch(bucket: usize, k: u32, advs: Vec<f64>, logprob: f64) -> (RolloutBatch, Vec<AdvantageBundle>) {
        let n = advs.len();
        let trajectories = (0..n)
            .map(|_| Trajectory {
                tool_calls: k,
                correct: true,
                action_logprob: logprob,
                task_id: 0,
            })
            .collect();
        let group = Group::new(trajectories).unwrap();
        let task = TaskSpec {
            difficulty: 0.1,
            bucket,
            task_id: 0,
        };
        let bundle = AdvantageBundle {
            method: Method::Vanilla,
            a_acc: advs.clone(),
            a_eff_raw: vec![0.0; n],
            a_eff_clipped: vec![0.0; n],
            a_final: advs,
        };
        (
            RolloutBatch {
                tasks: vec![task],
                groups: vec![group],
            },
            vec![bundle],
        )
    }

    #[test]
    fn zero_advantages_zero_gradient() {
        let params = PolicyParams::uniform(2, 4);
        let cfg = TrainConfig::default();
        let (batch, bundles) = single_batch(0, 2, vec![0.0, 0.0], 0.2f64.ln());
        let grad = surrogate_gradient(&batch, &bundles, &params, &params, &cfg).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        let obj = surrogate_objective(&batch, &bundles, &params, &params, &cfg).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn reinforce_form_at_old_params() {
        // params_new = params_old, single trajectory with advantage 1:
        // gradient = one_hot(k) - softmax(row), halved nothing (G = 2 here
        // with the second advantage 0, so scaled by 1/2).
        let params = PolicyParams::uniform(1, 4);
        let cfg = TrainConfig::default();
        let (batch, bundles) = single_batch(0, 3, vec![1.0, 0.0], 0.2f64.ln());
        let grad = surrogate_gradient(&batch, &bundles, &params, &params, &cfg).unwrap();
        for (m, g) in grad.iter().enumerate() {
            let expected = 0.5 * (if m == 3 { 1.0 } else { 0.0 } - 0.2);
            assert!((g - expected).abs() < 1e-12, "coord {m}: {g} vs {expected}");
        }
    }

    #[test]
    fn ratio_is_one_at_first_epoch() {
        let params = PolicyParams::uniform(2, 4);
        let lp = params.log_softmax_row(1).unwrap();
        let (batch, bundles) = single_batch(1, 2, vec![1.5, -0.5], lp[2]);
        let cfg = TrainConfig::default();
        // at ratio exactly 1, objective = mean advantage
        let obj = surrogate_objective(&batch, &bundles, &params, &params, &cfg).unwrap();
        assert!((obj - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipped_out_trajectory_contributes_no_gradient() {
        // Old logprob makes the ratio far above 1 + clip_high with a
        // positive advantage: min picks the clipped constant branch.
        let params = PolicyParams::uniform(1, 4);
        let cfg = TrainConfig::default();
        let old_logprob = 0.2f64.ln() - 1.0; // ratio = e > 1.28
        let (batch, bundles) = single_batch(0, 1, vec![2.0, 2.0], old_logprob);
        let grad = surrogate_gradient(&batch, &bundles, &params, &params, &cfg).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0), "grad = {grad:?}");
        // Negative advantage pulling inward stays active.
        let (batch, bundles) = single_batch(0, 1, vec![-2.0, -2.0], old_logprob);
        let grad = surrogate_gradient(&batch, &bundles, &params, &params, &cfg).unwrap();
        assert!(grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gradient_check_on_random_params() {
        let env = EnvConfig::default();
        let shaping = ShapingConfig::default();
        let tcfg = TrainConfig::default();
        let mut max_err = 0.0f64;
        for trial in 0..20 {
            let mut params = PolicyParams::uniform(env.num_buckets, shaping.n_max);
            let mut rng = derive_rng(77, 3, trial);
            for l in params.logits.iter_mut() {
                *l = rand::Rng::gen_range(&mut rng, -2.0..2.0);
            }
            let batch = sample_batch(&env, &params, &tcfg, trial as usize).unwrap();
            let bundles = compute_bundles(Method::Cas, &batch, &shaping).unwrap();
            let err = check_gradient(&params, &batch, &bundles, &tcfg).unwrap();
            max_err = max_err.max(err);
        }
        assert!(max_err <= 1e-5, "max relative error {max_err}");
    }

    #[test]
    fn kl_term_gradient_checks_out() {
        let env = EnvConfig::default();
        let shaping = ShapingConfig::default();
        let tcfg = TrainConfig {
            kl_coeff: 0.5,
            ..TrainConfig::default()
        };
        let mut params = PolicyParams::uniform(env.num_buckets, shaping.n_max);
        let mut rng = derive_rng(3, 9, 1);
        for l in params.logits.iter_mut() {
            *l = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let batch = sample_batch(&env, &params, &tcfg, 0).unwrap();
        let bundles = compute_bundles(Method::Cas, &batch, &shaping).unwrap();
        let err = check_gradient(&params, &batch, &bundles, &tcfg).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let env = EnvConfig::default();
        let shaping = ShapingConfig::default();
        let tcfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&env, &tcfg, &shaping).unwrap();
        assert_eq!(out.params, PolicyParams::uniform(2, 4));
        assert!(out.stats.is_empty());
    }

    #[test]
    fn same_seed_same_stats() {
        let env = EnvConfig::default();
        let shaping = ShapingConfig::default();
        let tcfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let a = train(&env, &tcfg, &shaping).unwrap();
        let b = train(&env, &tcfg, &shaping).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn vanilla_equals_cas_with_zero_lambda() {
        let env = EnvConfig::default();
        let tcfg = TrainConfig {
            steps: 30,
            method: Method::Vanilla,
            ..TrainConfig::default()
        };
        let shaping = ShapingConfig::default();
        let vanilla = train(&env, &tcfg, &shaping).unwrap();

        let tcfg_cas = TrainConfig {
            method: Method::Cas,
            ..tcfg
        };
        let shaping0 = ShapingConfig {
            lambda: 0.0,
            ..shaping
        };
        let cas = train(&env, &tcfg_cas, &shaping0).unwrap();
        assert_eq!(vanilla.params, cas.params);
    }
}
