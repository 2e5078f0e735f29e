//! Training loop: variant construction, G x M rollout, reward collection,
//! advantage computation, policy update, and per-step diagnostics.
//!
//! Rollouts within a step run against immutable policy snapshots with
//! per-episode substreams, so the parallel and sequential paths produce
//! bitwise-identical metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    clip_fraction, group_normalized_advantage, joint_dual_group_advantage, kl_penalty,
    mean_and_population_std, mean_only_advantage, objective_gradient_coefficients, AdvantageMatrix,
    AdvantageMode, GroupConfig, RewardMatrix, SampleLikelihoods,
};
use crate::env::{compute_reward, generate_episode, EnvConfig};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::policy::{
    aggregate_features, answer_distribution, apply_update, logprob, logprob_gradient,
    sample_answer, PolicyParams, SnapshotRole,
};
use crate::rng;
use crate::variants::{
    deterministic_variant_indices, importance_variant_indices, sample_augment_params,
    stochastic_variant_spec, VariantSpec,
};

/// Variant construction strategy used by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    Deterministic,
    Stochastic,
    Importance,
}

/// Full experiment configuration.
///
/// When loaded from a config file every field is required and unknown keys
/// are rejected; [`RunConfig::default`] carries the reference defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub group: GroupConfig,
    pub env: EnvConfig,
    /// How video variants are constructed each step.
    pub variant_mode: VariantMode,
    /// Softmax temperature for importance-based sampling.
    pub tau: f64,
    /// Frame budget per variant (and segment count in importance mode).
    pub budget: usize,
    /// Number of training steps.
    pub steps: usize,
    /// Gradient-ascent step size.
    pub learning_rate: f64,
    /// Master seed; every substream is derived from it.
    pub seed: u64,
    /// Episodes (prompt groups) per training step.
    pub episodes_per_step: usize,
    /// EMA coefficient for smoothed diagnostics.
    pub ema_alpha: f64,
    /// Where the metrics CSV is written by the CLI.
    pub metrics_path: PathBuf,
    /// Held-out evaluation cadence in steps.
    pub eval_every: usize,
    /// Held-out episodes per evaluation.
    pub eval_episodes: usize,
    /// Attach spatial augmentation parameters to deterministic / importance
    /// variants as well (stochastic variants always carry them).
    pub spatial_augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            group: GroupConfig::default(),
            env: EnvConfig::default(),
            variant_mode: VariantMode::Importance,
            tau: 0.4,
            budget: 16,
            steps: 500,
            learning_rate: 1e-2,
            seed: 0,
            episodes_per_step: 4,
            ema_alpha: 0.1,
            metrics_path: PathBuf::from("metrics.csv"),
            eval_every: 10,
            eval_episodes: 256,
            spatial_augment: false,
        }
    }
}

impl RunConfig {
    /// Reject contradictory settings before step 0.
    pub fn validate(&self) -> Result<()> {
        self.group.validate()?;
        self.env.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.episodes_per_step == 0 {
            return Err(Error::InvalidConfig("episodes_per_step must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite".into()));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ema_alpha must be in (0, 1], got {}",
                self.ema_alpha
            )));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig(
                "eval_every and eval_episodes must be >= 1".into(),
            ));
        }
        match self.variant_mode {
            VariantMode::Importance => {
                if !(self.tau > 0.0) || !self.tau.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "importance mode requires tau > 0, got {}",
                        self.tau
                    )));
                }
            }
            VariantMode::Stochastic => {
                if self.env.num_frames < self.budget {
                    return Err(Error::BudgetInfeasible(format!(
                        "budget {} exceeds {} frames",
                        self.budget, self.env.num_frames
                    )));
                }
            }
            VariantMode::Deterministic => {
                // Every offset must fit; checking the last one covers all.
                deterministic_variant_indices(
                    self.env.num_frames,
                    self.budget,
                    self.group.num_variants,
                    self.group.num_variants - 1,
                )?;
            }
        }
        Ok(())
    }
}

/// Diagnostics for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean reward over every rollout this step.
    pub reward_mean: f64,
    /// Population std of the G x M pool, averaged over the step's groups.
    pub reward_std: f64,
    /// Fraction of this step's groups with pool reward std below the guard.
    pub zero_adv_frac: f64,
    /// L2 norm of the full parameter gradient.
    pub grad_norm: f64,
    /// Mean k3 KL penalty against the reference policy.
    pub kl: f64,
    /// Fraction of samples on the strictly clipped branch.
    pub clip_frac: f64,
    /// Most recent held-out accuracy under argmax decoding.
    pub eval_accuracy: f64,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub rows: Vec<MetricsRow>,
    /// Rollouts executed per step (episodes x G x M), asserted identical
    /// across steps.
    pub rollouts_per_step: u64,
    pub total_rollouts: u64,
    pub final_params: PolicyParams,
}

struct EpisodeOutcome {
    gradient: Mat,
    reward_sum: f64,
    pool_std: f64,
    zero_group: bool,
    kl_sum: f64,
    clip_frac: f64,
    rollouts: u64,
}

fn build_variants(
    config: &RunConfig,
    episode: &crate::env::Episode,
    step: usize,
    episode_idx: usize,
) -> Result<Vec<VariantSpec>> {
    let seed = config.seed;
    let m = config.group.num_variants;
    let f = config.env.num_frames;
    let variant_seed = rng::derive(seed, &[rng::VARIANT, step as u64, episode_idx as u64]);
    match config.variant_mode {
        VariantMode::Deterministic => (0..m)
            .map(|i| deterministic_variant_indices(f, config.budget, m, i))
            .collect::<Result<Vec<_>>>(),
        VariantMode::Stochastic => (0..m)
            .map(|i| {
                let mut vrng = rng::substream(variant_seed, &[i as u64]);
                stochastic_variant_spec(f, config.budget, i, &mut vrng)
            })
            .collect::<Result<Vec<_>>>(),
        VariantMode::Importance => {
            let scores = episode.frame_scores()?;
            importance_variant_indices(
                scores.as_slice(),
                config.budget,
                config.tau,
                m,
                variant_seed,
            )
        }
    }
}

fn advantages_for(
    config: &GroupConfig,
    rewards: &RewardMatrix,
) -> Result<AdvantageMatrix> {
    match config.advantage_mode {
        AdvantageMode::Joint => joint_dual_group_advantage(rewards, config.std_guard),
        AdvantageMode::Grpo => {
            // M = 1 is enforced by validate(); the pool is a single column.
            let (flat, flag) = group_normalized_advantage(rewards.flattened(), config.std_guard)?;
            Ok(AdvantageMatrix {
                values: Mat::from_vec(rewards.generations(), rewards.variants(), flat)?,
                zero_advantage_flag: flag,
            })
        }
        AdvantageMode::DrGrpo => {
            let flat = mean_only_advantage(rewards.flattened())?;
            Ok(AdvantageMatrix {
                values: Mat::from_vec(rewards.generations(), rewards.variants(), flat)?,
                zero_advantage_flag: false,
            })
        }
    }
}

fn run_episode(
    config: &RunConfig,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    step: usize,
    episode_idx: usize,
) -> Result<EpisodeOutcome> {
    let g = config.group.num_generations;
    let m = config.group.num_variants;
    let seed = config.seed;

    let mut episode_rng =
        rng::substream(seed, &[rng::EPISODE, step as u64, episode_idx as u64]);
    let episode = generate_episode(&config.env, &mut episode_rng)?;
    let mut variants = build_variants(config, &episode, step, episode_idx)?;

    // Per-variant features and the old-policy answer distribution. The old
    // policy is the step-start snapshot, i.e. `params` itself here.
    let mut features = Vec::with_capacity(m);
    let mut distributions = Vec::with_capacity(m);
    for (v, variant) in variants.iter_mut().enumerate() {
        let mut aug_rng = rng::substream(
            seed,
            &[rng::AUGMENT, step as u64, episode_idx as u64, v as u64],
        );
        if config.spatial_augment && config.variant_mode != VariantMode::Stochastic {
            variant.augment = Some(sample_augment_params(&mut aug_rng));
        }
        let feats = aggregate_features(&episode.frame_features, variant, &mut aug_rng)?;
        distributions.push(answer_distribution(params, &feats)?);
        features.push(feats);
    }

    let mut rewards = Mat::zeros(g, m);
    let mut answers = vec![vec![0usize; m]; g];
    let mut rollouts = 0u64;
    for v in 0..m {
        let mut rollout_rng = rng::substream(
            seed,
            &[rng::ROLLOUT, step as u64, episode_idx as u64, v as u64],
        );
        for gi in 0..g {
            let answer = sample_answer(&distributions[v], &mut rollout_rng);
            answers[gi][v] = answer;
            rewards.set(gi, v, compute_reward(&episode, answer, &config.env)?);
            rollouts += 1;
        }
    }
    debug_assert_eq!(rollouts, (g * m) as u64);

    let reward_matrix = RewardMatrix::new(rewards)?;
    let (_, pool_std) = mean_and_population_std(reward_matrix.flattened());
    let zero_group = pool_std < config.group.std_guard;
    let advantages = advantages_for(&config.group, &reward_matrix)?;

    let mut lp_current = Mat::zeros(g, m);
    let mut lp_old = Mat::zeros(g, m);
    let mut lp_ref = Mat::zeros(g, m);
    let mut kl_sum = 0.0;
    for gi in 0..g {
        for v in 0..m {
            let answer = answers[gi][v];
            let cur = logprob(params, &features[v], answer)?;
            // Single inner epoch: the behavior policy is the step-start
            // snapshot, so old == current at collection time.
            lp_current.set(gi, v, cur);
            lp_old.set(gi, v, cur);
            let rp = logprob(ref_params, &features[v], answer)?;
            lp_ref.set(gi, v, rp);
            kl_sum += kl_penalty(cur, rp)?;
        }
    }
    let likelihoods = SampleLikelihoods::new(lp_current, lp_old, lp_ref)?;
    let coefficients = objective_gradient_coefficients(&likelihoods, &advantages, &config.group)?;
    let clip = clip_fraction(&likelihoods, &advantages, config.group.clip_epsilon)?;

    let mut gradient = Mat::zeros(params.num_answers(), params.feature_dim());
    for gi in 0..g {
        for v in 0..m {
            let coeff = coefficients.get(gi, v);
            if coeff != 0.0 {
                let lp_grad = logprob_gradient(params, &features[v], answers[gi][v])?;
                gradient.add_scaled(&lp_grad, coeff)?;
            }
        }
    }

    let reward_sum: f64 = reward_matrix.flattened().iter().sum();
    Ok(EpisodeOutcome {
        gradient,
        reward_sum,
        pool_std,
        zero_group,
        kl_sum,
        clip_frac: clip,
        rollouts,
    })
}

fn map_indexed<T: Send>(
    parallel: bool,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Held-out accuracy under argmax decoding (ties toward the lowest index).
///
/// Episodes come from the `EVAL` substream of `eval_seed`, independent of the
/// step index, so the same seed always evaluates on the same block.
pub fn evaluate_policy(
    params: &PolicyParams,
    env: &EnvConfig,
    budget: usize,
    num_episodes: usize,
    eval_seed: u64,
) -> Result<f64> {
    if num_episodes == 0 {
        return Err(Error::InvalidConfig("num_episodes must be >= 1".into()));
    }
    let view = deterministic_variant_indices(env.num_frames, budget.min(env.num_frames), 1, 0)?;
    let mut correct = 0usize;
    for i in 0..num_episodes {
        let mut ep_rng = rng::substream(eval_seed, &[rng::EVAL, i as u64]);
        let episode = generate_episode(env, &mut ep_rng)?;
        let mut unused = rng::substream(eval_seed, &[rng::EVAL, i as u64, 1]);
        let feats = aggregate_features(&episode.frame_features, &view, &mut unused)?;
        let dist = answer_distribution(params, &feats)?;
        let mut best = 0usize;
        for (a, p) in dist.iter().enumerate() {
            if *p > dist[best] {
                best = a;
            }
        }
        if best == episode.correct_answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / num_episodes as f64)
}

/// Exponential moving average: `y_0 = x_0`, `y_t = alpha x_t + (1-alpha) y_{t-1}`.
pub fn ema_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ema alpha must be in (0, 1], got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut prev = series[0];
    out.push(prev);
    for &x in &series[1..] {
        prev = alpha * x + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

fn run_training_impl(config: &RunConfig, parallel: bool) -> Result<TrainingOutput> {
    config.validate()?;
    let mut params = PolicyParams::zeros(config.env.num_answers, config.env.feature_dim)?;
    let ref_snapshot = params.snapshot(SnapshotRole::Ref);
    let expected_rollouts_per_step =
        (config.episodes_per_step * config.group.pool_size()) as u64;

    let mut eval_accuracy = evaluate_policy(
        &params,
        &config.env,
        config.budget,
        config.eval_episodes,
        config.seed,
    )?;

    let mut rows = Vec::with_capacity(config.steps);
    let mut total_rollouts = 0u64;
    for step in 0..config.steps {
        // The step-start snapshot is both the behavior policy and the target
        // of this step's single gradient update.
        let outcomes = map_indexed(parallel, config.episodes_per_step, |episode_idx| {
            run_episode(config, &params, ref_snapshot.params(), step, episode_idx)
        })?;

        let episodes = outcomes.len() as f64;
        let pool = config.group.pool_size() as f64;
        let mut gradient = Mat::zeros(params.num_answers(), params.feature_dim());
        let mut reward_sum = 0.0;
        let mut std_sum = 0.0;
        let mut zero_groups = 0usize;
        let mut kl_sum = 0.0;
        let mut clip_sum = 0.0;
        let mut step_rollouts = 0u64;
        for outcome in &outcomes {
            gradient.add_scaled(&outcome.gradient, 1.0 / episodes)?;
            reward_sum += outcome.reward_sum;
            std_sum += outcome.pool_std;
            zero_groups += outcome.zero_group as usize;
            kl_sum += outcome.kl_sum;
            clip_sum += outcome.clip_frac;
            step_rollouts += outcome.rollouts;
        }
        if step_rollouts != expected_rollouts_per_step {
            return Err(Error::InvalidConfig(format!(
                "rollout accounting broke: {step_rollouts} != {expected_rollouts_per_step}"
            )));
        }
        total_rollouts += step_rollouts;

        let grad_norm = gradient.frobenius_norm();
        match apply_update(&params, &gradient, config.learning_rate) {
            Ok(updated) => params = updated,
            // Skip the step on a rejected update; the row still records it.
            Err(Error::UpdateRejected(_)) => {}
            Err(e) => return Err(e),
        }

        if (step + 1) % config.eval_every == 0 {
            eval_accuracy = evaluate_policy(
                &params,
                &config.env,
                config.budget,
                config.eval_episodes,
                config.seed,
            )?;
        }

        rows.push(MetricsRow {
            step,
            reward_mean: reward_sum / (episodes * pool),
            reward_std: std_sum / episodes,
            zero_adv_frac: zero_groups as f64 / episodes,
            grad_norm,
            kl: kl_sum / (episodes * pool),
            clip_frac: clip_sum / episodes,
            eval_accuracy,
        });
    }

    Ok(TrainingOutput {
        rows,
        rollouts_per_step: expected_rollouts_per_step,
        total_rollouts,
        final_params: params,
    })
}

/// Run training with the default execution mode: data-parallel across the
/// step's episodes when the `parallel` feature is enabled, sequential
/// otherwise. Deterministic given the config's seed either way.
pub fn run_training(config: &RunConfig) -> Result<TrainingOutput> {
    run_training_impl(config, cfg!(feature = "parallel"))
}

/// Run training strictly sequentially; bitwise-identical to [`run_training`].
pub fn run_training_sequential(config: &RunConfig) -> Result<TrainingOutput> {
    run_training_impl(config, false)
}

/// Write the metrics CSV: fixed header, one row per step, six fractional
/// digits, newline-terminated.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

/// Write the metrics CSV to any writer.
pub fn write_metrics(w: &mut impl Write, rows: &[MetricsRow]) -> Result<()> {
    writeln!(
        w,
        "step,reward_mean,reward_std,zero_adv_frac,grad_norm,kl,clip_frac,eval_accuracy"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step,
            r.reward_mean,
            r.reward_std,
            r.zero_adv_frac,
            r.grad_norm,
            r.kl,
            r.clip_frac,
            r.eval_accuracy
        )?;
    }
    Ok(())
}
