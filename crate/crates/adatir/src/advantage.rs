//! Difficulty-aware efficiency rewards and advantage shaping.
//!
//! Implements the three advantage estimators compared in the ablations:
//!
//! - `Vanilla`: group-normalized correctness only.
//! - `NaiveShaping`: correctness and efficiency penalty summed into one
//!   reward before normalization. Unstable once a group saturates, because
//!   the normalized advantage is then driven entirely by tool-count noise.
//! - `Cas` (Clipped Advantage Shaping): correctness and efficiency are
//!   normalized separately; the efficiency advantage is clipped to
//!   `delta * |A_acc| + eta` and masked to correct trajectories, so it can
//!   never flip the sign of a dominant correctness signal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdvantageError {
    #[error("group must contain at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("trajectories in a group must share one task id")]
    MixedTaskIds,
    #[error("tool_calls {tool_calls} outside [0, {n_max}]")]
    ToolCallsOutOfRange { tool_calls: u32, n_max: u32 },
    #[error("invalid shaping config: {0}")]
    InvalidConfig(String),
}

/// Hyperparameters of the shaped reward and of CAS.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    /// Efficiency penalty scale. The group normalization inside CAS makes
    /// it scale-free there; it only changes naive shaping and raw rewards.
    pub lambda: f64,
    /// Difficulty threshold: the penalty applies only when the estimated
    /// group difficulty is below this value.
    pub phi_low: f64,
    /// Weight of the clipped efficiency advantage.
    pub beta: f64,
    /// Clip fraction relative to |A_acc|.
    pub delta: f64,
    /// Additive clip margin, keeps the clip window open when A_acc = 0.
    pub eta: f64,
    /// Tool-call limit per trajectory.
    pub n_max: u32,
    /// Groups with population std below this normalize to all zeros.
    pub std_floor: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            phi_low: 0.8,
            beta: 0.9,
            delta: 0.99,
            eta: 1e-4,
            n_max: 4,
            std_floor: 1e-8,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), AdvantageError> {
        let err = |msg: &str| Err(AdvantageError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.phi_low) {
            return err("phi_low must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return err("delta must be in [0, 1)");
        }
        if !(self.beta > 0.0) {
            return err("beta must be positive");
        }
        if !(self.eta > 0.0) {
            return err("eta must be positive");
        }
        if self.n_max < 1 {
            return err("n_max must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return err("lambda must be nonnegative");
        }
        if !(self.std_floor > 0.0) {
            return err("std_floor must be positive");
        }
        if !(self.beta * self.delta < 1.0) {
            return err("beta * delta must be < 1 (sign-preservation bound)");
        }
        Ok(())
    }
}

/// One rollout, reduced to the quantities the trainer needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Trajectory {
    pub tool_calls: u32,
    pub correct: bool,
    /// log pi(k | bucket) of the sampled action under the rollout policy.
    pub action_logprob: f64,
    pub task_id: u64,
}

/// The G rollouts sampled for one task; the unit of normalization.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Group {
    trajectories: Vec<Trajectory>,
}

impl Group {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self, AdvantageError> {
        if trajectories.len() < 2 {
            return Err(AdvantageError::GroupTooSmall(trajectories.len()));
        }
        let task_id = trajectories[0].task_id;
        if trajectories.iter().any(|t| t.task_id != task_id) {
            return Err(AdvantageError::MixedTaskIds);
        }
        Ok(Self { trajectories })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn task_id(&self) -> u64 {
        self.trajectories[0].task_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    NaiveShaping,
    Cas,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vanilla, Method::NaiveShaping, Method::Cas];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::NaiveShaping => "naive_shaping",
            Method::Cas => "cas",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-trajectory advantages for one group under one method.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdvantageBundle {
    pub method: Method,
    pub a_acc: Vec<f64>,
    pub a_eff_raw: Vec<f64>,
    pub a_eff_clipped: Vec<f64>,
    pub a_final: Vec<f64>,
}

/// Group difficulty: complement of the group success rate.
pub fn estimate_difficulty(group: &Group) -> f64 {
    let correct: u32 = group.trajectories().iter().map(|t| t.correct as u32).sum();
    1.0 - f64::from(correct) / group.len() as f64
}

/// Sine penalty factor, monotone and concave on [0, n_max].
pub fn penalty_factor(tool_calls: u32, n_max: u32) -> Result<f64, AdvantageError> {
    if n_max < 1 || tool_calls > n_max {
        return Err(AdvantageError::ToolCallsOutOfRange { tool_calls, n_max });
    }
    Ok((std::f64::consts::FRAC_PI_2 * f64::from(tool_calls) / f64::from(n_max)).sin())
}

/// Efficiency penalty, applied only to correct trajectories on easy tasks.
pub fn efficiency_reward(
    traj: &Trajectory,
    phi: f64,
    cfg: &ShapingConfig,
) -> Result<f64, AdvantageError> {
    if traj.correct && phi < cfg.phi_low {
        Ok(-cfg.lambda * penalty_factor(traj.tool_calls, cfg.n_max)?)
    } else {
        Ok(0.0)
    }
}

/// Z-normalization with population std. A group whose std falls below
/// `std_floor` carries no signal and normalizes to all zeros.
pub fn group_normalize(values: &[f64], std_floor: f64) -> Result<Vec<f64>, AdvantageError> {
    let n = values.len();
    if n < 2 {
        return Err(AdvantageError::GroupTooSmall(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; n]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

fn reward_vectors(
    group: &Group,
    cfg: &ShapingConfig,
) -> Result<(Vec<f64>, Vec<f64>), AdvantageError> {
    let phi = estimate_difficulty(group);
    let mut r_acc = Vec::with_capacity(group.len());
    let mut r_eff = Vec::with_capacity(group.len());
    for traj in group.trajectories() {
        r_acc.push(traj.correct as u32 as f64);
        r_eff.push(efficiency_reward(traj, phi, cfg)?);
    }
    Ok((r_acc, r_eff))
}

/// Vanilla GRPO: advantage is the normalized correctness reward.
pub fn vanilla_advantage(
    group: &Group,
    cfg: &ShapingConfig,
) -> Result<AdvantageBundle, AdvantageError> {
    let (r_acc, _) = reward_vectors(group, cfg)?;
    let a_acc = group_normalize(&r_acc, cfg.std_floor)?;
    let zeros = vec![0.0; group.len()];
    Ok(AdvantageBundle {
        method: Method::Vanilla,
        a_final: a_acc.clone(),
        a_acc,
        a_eff_raw: zeros.clone(),
        a_eff_clipped: zeros,
    })
}

/// Normalize summed accuracy + efficiency rewards. Exposed separately so the
/// degenerate all-correct behavior can be checked on hand-built rewards.
pub fn normalize_totals(
    r_acc: &[f64],
    r_eff: &[f64],
    std_floor: f64,
) -> Result<Vec<f64>, AdvantageError> {
    let totals: Vec<f64> = r_acc.iter().zip(r_eff).map(|(a, e)| a + e).collect();
    group_normalize(&totals, std_floor)
}

/// Naive reward shaping: normalize the summed reward. In an all-correct
/// group the correctness term cancels and the advantage is driven purely by
/// tool-count differences, which is exactly the instability CAS removes.
pub fn naive_shaped_advantage(
    group: &Group,
    cfg: &ShapingConfig,
) -> Result<AdvantageBundle, AdvantageError> {
    let (r_acc, r_eff) = reward_vectors(group, cfg)?;
    let a_final = normalize_totals(&r_acc, &r_eff, cfg.std_floor)?;
    let a_acc = group_normalize(&r_acc, cfg.std_floor)?;
    Ok(AdvantageBundle {
        method: Method::NaiveShaping,
        a_acc,
        a_eff_clipped: r_eff.clone(),
        a_eff_raw: r_eff,
        a_final,
    })
}

/// Clip the raw efficiency advantage into `[-(delta|a_acc| + eta), delta|a_acc| + eta]`.
pub fn clip_efficiency(a_eff_raw: f64, a_acc: f64, cfg: &ShapingConfig) -> f64 {
    let bound = cfg.delta * a_acc.abs() + cfg.eta;
    a_eff_raw.clamp(-bound, bound)
}

/// Combine one trajectory's advantages under CAS. Incorrect trajectories
/// pass the accuracy advantage through untouched.
pub fn cas_combine(a_acc: f64, a_eff_clipped: f64, correct: bool, beta: f64) -> f64 {
    if correct {
        a_acc + beta * a_eff_clipped
    } else {
        a_acc
    }
}

/// Clipped Advantage Shaping: separate normalization of correctness and
/// efficiency, clipping of the efficiency term, correctness mask.
pub fn cas_advantage(
    group: &Group,
    cfg: &ShapingConfig,
) -> Result<AdvantageBundle, AdvantageError> {
    let (r_acc, r_eff) = reward_vectors(group, cfg)?;
    let a_acc = group_normalize(&r_acc, cfg.std_floor)?;
    let a_eff_raw = group_normalize(&r_eff, cfg.std_floor)?;
    let a_eff_clipped: Vec<f64> = a_eff_raw
        .iter()
        .zip(&a_acc)
        .map(|(&e, &a)| clip_efficiency(e, a, cfg))
        .collect();
    let a_final: Vec<f64> = group
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, t)| cas_combine(a_acc[i], a_eff_clipped[i], t.correct, cfg.beta))
        .collect();
    Ok(AdvantageBundle {
        method: Method::Cas,
        a_acc,
        a_eff_raw,
        a_eff_clipped,
        a_final,
    })
}

/// Dispatch on the configured method.
pub fn compute_bundle(
    method: Method,
    group: &Group,
    cfg: &ShapingConfig,
) -> Result<AdvantageBundle, AdvantageError> {
    match method {
        Method::Vanilla => vanilla_advantage(group, cfg),
        Method::NaiveShaping => naive_shaped_advantage(group, cfg),
        Method::Cas => cas_advantage(group, cfg),
    }
}

/// Minimum accuracy advantage above which a correct trajectory is
/// guaranteed a positive CAS advantage: beta * eta / (1 - beta * delta).
pub fn case_a_threshold(cfg: &ShapingConfig) -> Result<f64, AdvantageError> {
    let denom = 1.0 - cfg.beta * cfg.delta;
    if denom <= 0.0 {
        return Err(AdvantageError::InvalidConfig(
            "beta * delta must be < 1".to_string(),
        ));
    }
    Ok(cfg.beta * cfg.eta / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(tool_calls: u32, correct: bool) -> Trajectory {
        Trajectory {
            tool_calls,
            correct,
            action_logprob: 0.0,
            task_id: 7,
        }
    }

    fn group_of(specs: &[(u32, bool)]) -> Group {
        Group::new(specs.iter().map(|&(k, c)| traj(k, c)).collect()).unwrap()
    }

    #[test]
    fn difficulty_is_failure_rate() {
        let all_correct = group_of(&[(0, true); 16]);
        assert_eq!(estimate_difficulty(&all_correct), 0.0);
        let all_wrong = group_of(&[(0, false); 16]);
        assert_eq!(estimate_difficulty(&all_wrong), 1.0);
        let mut specs = vec![(0, true); 4];
        specs.extend(vec![(0, false); 12]);
        assert_eq!(estimate_difficulty(&group_of(&specs)), 0.75);
    }

    #[test]
    fn group_requires_two_trajectories() {
        assert!(matches!(
            Group::new(vec![traj(0, true)]),
            Err(AdvantageError::GroupTooSmall(1))
        ));
        assert!(matches!(
            Group::new(vec![]),
            Err(AdvantageError::GroupTooSmall(0))
        ));
    }

    #[test]
    fn group_rejects_mixed_task_ids() {
        let mut t = traj(0, true);
        t.task_id = 8;
        assert!(matches!(
            Group::new(vec![traj(0, true), t]),
            Err(AdvantageError::MixedTaskIds)
        ));
    }

    #[test]
    fn penalty_factor_endpoints() {
        assert_eq!(penalty_factor(0, 4).unwrap(), 0.0);
        assert_eq!(penalty_factor(4, 4).unwrap(), 1.0);
        assert!((penalty_factor(2, 4).unwrap() - 0.7071067811865476).abs() <= 1e-15);
    }

    #[test]
    fn penalty_factor_domain_errors() {
        assert!(penalty_factor(5, 4).is_err());
        assert!(penalty_factor(0, 0).is_err());
    }

    #[test]
    fn efficiency_reward_cases() {
        let cfg = ShapingConfig::default();
        // correct on an easy task: -lambda * sin(pi/4)
        let r = efficiency_reward(&traj(2, true), 0.5, &cfg).unwrap();
        assert!((r - -0.7071067811865476).abs() <= 1e-15);
        // incorrect: always zero
        assert_eq!(efficiency_reward(&traj(4, false), 0.1, &cfg).unwrap(), 0.0);
        // hard task (phi >= phi_low): zero
        assert_eq!(efficiency_reward(&traj(4, true), 0.9, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn group_normalize_basics() {
        assert_eq!(
            group_normalize(&[1.0, 1.0, 1.0, 1.0], 1e-8).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(group_normalize(&[1.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_normalize(&[2.0, 2.0, 2.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(group_normalize(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn naive_shaping_sign_reversal() {
        let cfg = ShapingConfig::default();
        // Hand-built rewards: all-correct pair, efficiency [-0.2, -0.5].
        // Totals [0.8, 0.5], mean 0.65, population std 0.15 -> [1, -1].
        let a = normalize_totals(&[1.0, 1.0], &[-0.2, -0.5], cfg.std_floor).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert!((a[1] + 1.0).abs() < 1e-12);

        // lambda = 0 reduces to vanilla normalization of correctness.
        let cfg0 = ShapingConfig {
            lambda: 0.0,
            ..ShapingConfig::default()
        };
        let g = group_of(&[(1, true), (3, false), (0, true), (4, false)]);
        let naive = naive_shaped_advantage(&g, &cfg0).unwrap();
        let vanilla = vanilla_advantage(&g, &cfg0).unwrap();
        assert_eq!(naive.a_final, vanilla.a_final);

        // constant totals hit the std floor
        let g = group_of(&[(2, true), (2, true), (2, true)]);
        let naive = naive_shaped_advantage(&g, &cfg).unwrap();
        assert_eq!(naive.a_final, vec![0.0; 3]);
    }

    #[test]
    fn cas_incorrect_passthrough_is_bitwise() {
        let cfg = ShapingConfig::default();
        let g = group_of(&[(0, true), (3, false), (4, true), (1, false)]);
        let b = cas_advantage(&g, &cfg).unwrap();
        for (i, t) in g.trajectories().iter().enumerate() {
            if !t.correct {
                assert_eq!(b.a_final[i].to_bits(), b.a_acc[i].to_bits());
            }
        }
    }

    #[test]
    fn cas_all_correct_bound() {
        let cfg = ShapingConfig::default();
        let g = group_of(&[(0, true), (1, true), (4, true), (2, true)]);
        let b = cas_advantage(&g, &cfg).unwrap();
        for a in &b.a_final {
            assert!(a.abs() <= cfg.beta * cfg.eta + 1e-15, "a = {a}");
        }
    }

    #[test]
    fn cas_clip_example() {
        // a_acc = [1, -1] from one correct + one incorrect; a raw efficiency
        // advantage of -2.0 on the correct trajectory clips to the bound.
        let cfg = ShapingConfig::default();
        assert_eq!(group_normalize(&[1.0, 0.0], cfg.std_floor).unwrap(), vec![1.0, -1.0]);
        let clipped = clip_efficiency(-2.0, 1.0, &cfg);
        assert!((clipped + 0.9901).abs() < 1e-12);
        let a_final = cas_combine(1.0, clipped, true, cfg.beta);
        assert!((a_final - 0.108910).abs() < 1e-6);
    }

    #[test]
    fn case_a_threshold_values() {
        let cfg = ShapingConfig::default();
        let t = case_a_threshold(&cfg).unwrap();
        assert!((8.25e-4..=8.27e-4).contains(&t), "t = {t}");

        let cfg_eta0 = ShapingConfig {
            eta: 0.0,
            ..ShapingConfig::default()
        };
        assert_eq!(case_a_threshold(&cfg_eta0).unwrap(), 0.0);

        let cfg_mid = ShapingConfig {
            beta: 0.5,
            delta: 0.5,
            eta: 0.01,
            ..ShapingConfig::default()
        };
        let t = case_a_threshold(&cfg_mid).unwrap();
        assert!((t - 0.005 / 0.75).abs() < 1e-12);

        let bad = ShapingConfig {
            beta: 2.0,
            delta: 0.6,
            ..ShapingConfig::default()
        };
        assert!(case_a_threshold(&bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ShapingConfig::default().validate().is_ok());
        let bad = ShapingConfig {
            delta: 1.0,
            ..ShapingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ShapingConfig {
            beta: 1.2,
            delta: 0.9,
            ..ShapingConfig::default()
        };
        assert!(bad.validate().is_err(), "beta*delta >= 1 must be rejected");
        let bad = ShapingConfig {
            n_max: 0,
            ..ShapingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn vanilla_bundle_shape() {
        let cfg = ShapingConfig::default();
        let g = group_of(&[(1, true), (3, false)]);
        let b = vanilla_advantage(&g, &cfg).unwrap();
        assert_eq!(b.a_eff_raw, vec![0.0, 0.0]);
        assert_eq!(b.a_eff_clipped, vec![0.0, 0.0]);
        assert_eq!(b.a_final, b.a_acc);
    }

    #[test]
    fn penalty_is_monotone_and_concave() {
        for n_max in 1..=8u32 {
            let f: Vec<f64> = (0..=n_max)
                .map(|k| penalty_factor(k, n_max).unwrap())
                .collect();
            for w in f.windows(2) {
                assert!(w[1] >= w[0]);
            }
            let diffs: Vec<f64> = f.windows(2).map(|w| w[1] - w[0]).collect();
            for w in diffs.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "forward differences must shrink");
            }
        }
    }
}
