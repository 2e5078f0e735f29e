//! Group-relative advantage normalization and the clipped surrogate objective.
//!
//! Three advantage modes are supported: per-group z-score normalization
//! (GRPO), mean-only centering (Dr.GRPO), and joint normalization over the
//! full `G x M` pool of answer samples times video variants. The joint mode
//! is what keeps the advantage denominator alive when answers to a single
//! fixed view become uniformly correct or incorrect.
//!
//! All functions are pure and safe to call from multiple threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// How advantages are computed from a reward pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Per-group z-score normalization; requires a single variant (M = 1).
    Grpo,
    /// Mean-only centering, no std denominator; requires M = 1.
    DrGrpo,
    /// Joint z-score normalization over the flattened G x M pool.
    Joint,
}

/// Group geometry and objective hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    /// Number of answer generations per variant (G).
    pub num_generations: usize,
    /// Number of video variants per episode (M).
    pub num_variants: usize,
    /// PPO clip width epsilon.
    pub clip_epsilon: f64,
    /// KL penalty coefficient beta.
    pub kl_coeff: f64,
    /// Zero-variance guard: groups with population std below this are zeroed.
    pub std_guard: f64,
    /// Advantage normalization mode.
    pub advantage_mode: AdvantageMode,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            num_generations: 4,
            num_variants: 2,
            clip_epsilon: 0.2,
            kl_coeff: 0.04,
            std_guard: 1e-6,
            advantage_mode: AdvantageMode::Joint,
        }
    }
}

impl GroupConfig {
    /// Total rollout budget per episode (G x M).
    pub fn pool_size(&self) -> usize {
        self.num_generations * self.num_variants
    }

    /// Reject contradictory settings before any training step runs.
    pub fn validate(&self) -> Result<()> {
        if self.num_generations == 0 || self.num_variants == 0 {
            return Err(Error::InvalidConfig(
                "num_generations and num_variants must be >= 1".into(),
            ));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_epsilon must be > 0, got {}",
                self.clip_epsilon
            )));
        }
        if self.kl_coeff < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "kl_coeff must be >= 0, got {}",
                self.kl_coeff
            )));
        }
        if !(self.std_guard > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "std_guard must be > 0, got {}",
                self.std_guard
            )));
        }
        if matches!(self.advantage_mode, AdvantageMode::Grpo | AdvantageMode::DrGrpo)
            && self.num_variants != 1
        {
            return Err(Error::InvalidConfig(format!(
                "{:?} requires num_variants = 1, got {}",
                self.advantage_mode, self.num_variants
            )));
        }
        Ok(())
    }
}

/// G x M matrix of scalar rewards for one episode's rollout pool.
///
/// Rows index answer generations, columns index video variants.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMatrix {
    values: Mat,
}

impl RewardMatrix {
    /// Validate finiteness and wrap.
    pub fn new(values: Mat) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::InvalidValue("non-finite reward".into()));
        }
        Ok(Self { values })
    }

    /// Build from a flat row-major vector of G x M rewards.
    pub fn from_flat(generations: usize, variants: usize, rewards: Vec<f64>) -> Result<Self> {
        Self::new(Mat::from_vec(generations, variants, rewards)?)
    }

    pub fn generations(&self) -> usize {
        self.values.rows()
    }

    pub fn variants(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// Row-major flattening of the pool.
    pub fn flattened(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Advantages for one episode's rollout pool, plus the guard outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageMatrix {
    /// G x M advantages aligned with the reward matrix.
    pub values: Mat,
    /// True iff the zero-variance guard fired and every advantage is 0.
    pub zero_advantage_flag: bool,
}

/// Per-sample log-probabilities under the current, old, and reference policies.
#[derive(Debug, Clone)]
pub struct SampleLikelihoods {
    pub logprob_current: Mat,
    pub logprob_old: Mat,
    pub logprob_ref: Mat,
}

impl SampleLikelihoods {
    /// Validate matching shapes and finiteness.
    pub fn new(logprob_current: Mat, logprob_old: Mat, logprob_ref: Mat) -> Result<Self> {
        let (r, c) = (logprob_current.rows(), logprob_current.cols());
        for (name, m) in [("logprob_old", &logprob_old), ("logprob_ref", &logprob_ref)] {
            if m.rows() != r || m.cols() != c {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {r}x{c}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for m in [&logprob_current, &logprob_old, &logprob_ref] {
            if !m.all_finite() {
                return Err(Error::InvalidValue("non-finite log-probability".into()));
            }
        }
        Ok(Self {
            logprob_current,
            logprob_old,
            logprob_ref,
        })
    }

    pub fn generations(&self) -> usize {
        self.logprob_current.rows()
    }

    pub fn variants(&self) -> usize {
        self.logprob_current.cols()
    }
}

fn require_finite(rewards: &[f64]) -> Result<()> {
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidValue("non-finite reward".into()));
    }
    Ok(())
}

/// Mean and population standard deviation (divide by N, not N-1).
pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score normalization over one reward group.
///
/// If the population std falls below `guard`, every advantage is set to
/// exactly 0 and the returned flag is true: a zero-variance group carries no
/// relative signal, and dividing by a vanishing std would explode instead.
pub fn group_normalized_advantage(rewards: &[f64], guard: f64) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    require_finite(rewards)?;
    let (mean, std) = mean_and_population_std(rewards);
    if std < guard {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// Mean-only centering: `A_i = r_i - mean(r)`. No variance guard is needed.
pub fn mean_only_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    require_finite(rewards)?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Joint normalization over the full G x M pool.
///
/// Equivalent to [`group_normalized_advantage`] on the row-major flattening
/// of the reward matrix, reshaped back.
pub fn joint_dual_group_advantage(rewards: &RewardMatrix, guard: f64) -> Result<AdvantageMatrix> {
    let g = rewards.generations();
    let m = rewards.variants();
    if g * m < 2 {
        return Err(Error::InvalidGroup(format!(
            "pool size G*M must be >= 2, got {g}x{m}"
        )));
    }
    let (flat, zero_flag) = group_normalized_advantage(rewards.flattened(), guard)?;
    Ok(AdvantageMatrix {
        values: Mat::from_vec(g, m, flat)?,
        zero_advantage_flag: zero_flag,
    })
}

/// k3 KL estimator: `rho - ln(rho) - 1` with `rho = exp(logprob_ref - logprob_current)`.
///
/// Non-negative for all finite inputs and zero exactly when the two policies
/// assign the same probability.
pub fn kl_penalty(logprob_current: f64, logprob_ref: f64) -> Result<f64> {
    if !logprob_current.is_finite() || !logprob_ref.is_finite() {
        return Err(Error::InvalidValue("non-finite log-probability".into()));
    }
    let log_rho = logprob_ref - logprob_current;
    Ok(log_rho.exp() - log_rho - 1.0)
}

/// One clipped surrogate term: `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn clipped_surrogate_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> Result<f64> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidValue(format!(
            "probability ratio must be finite and > 0, got {ratio}"
        )));
    }
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    Ok((ratio * advantage).min(clipped * advantage))
}

fn check_shapes(likelihoods: &SampleLikelihoods, advantages: &AdvantageMatrix) -> Result<(usize, usize)> {
    let (g, m) = (likelihoods.generations(), likelihoods.variants());
    if advantages.values.rows() != g || advantages.values.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "advantages {}x{} vs likelihoods {g}x{m}",
            advantages.values.rows(),
            advantages.values.cols()
        )));
    }
    if g * m == 0 {
        return Err(Error::InvalidGroup("empty sample pool".into()));
    }
    Ok((g, m))
}

/// Clipped surrogate objective with KL penalty, averaged over the pool.
///
/// `J = mean_ij[ min(rho_ij A_ij, clip(rho_ij) A_ij) ] - beta * mean_ij[ k3_ij ]`
/// with `rho_ij = exp(logprob_current - logprob_old)`.
pub fn objective_value(
    likelihoods: &SampleLikelihoods,
    advantages: &AdvantageMatrix,
    config: &GroupConfig,
) -> Result<f64> {
    let (g, m) = check_shapes(likelihoods, advantages)?;
    let n = (g * m) as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for i in 0..g {
        for j in 0..m {
            let ratio =
                (likelihoods.logprob_current.get(i, j) - likelihoods.logprob_old.get(i, j)).exp();
            surrogate +=
                clipped_surrogate_term(ratio, advantages.values.get(i, j), config.clip_epsilon)?;
            kl += kl_penalty(
                likelihoods.logprob_current.get(i, j),
                likelihoods.logprob_ref.get(i, j),
            )?;
        }
    }
    Ok(surrogate / n - config.kl_coeff * kl / n)
}

/// Per-sample derivative of [`objective_value`] with respect to
/// `logprob_current`, including the 1/(G*M) averaging.
///
/// The surrogate contributes `rho * A` when the unclipped branch is active
/// (ties at the min broken toward the unclipped branch) and 0 otherwise; the
/// KL penalty contributes `-beta * (1 - rho_ref)`.
pub fn objective_gradient_coefficients(
    likelihoods: &SampleLikelihoods,
    advantages: &AdvantageMatrix,
    config: &GroupConfig,
) -> Result<Mat> {
    let (g, m) = check_shapes(likelihoods, advantages)?;
    let n = (g * m) as f64;
    let mut coeffs = Mat::zeros(g, m);
    for i in 0..g {
        for j in 0..m {
            let a = advantages.values.get(i, j);
            let ratio =
                (likelihoods.logprob_current.get(i, j) - likelihoods.logprob_old.get(i, j)).exp();
            if !(ratio > 0.0) || !ratio.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "probability ratio must be finite and > 0, got {ratio}"
                )));
            }
            let clipped = ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon);
            let unclipped_active = ratio * a <= clipped * a;
            let surrogate_grad = if unclipped_active { ratio * a } else { 0.0 };
            let rho_ref =
                (likelihoods.logprob_ref.get(i, j) - likelihoods.logprob_current.get(i, j)).exp();
            let kl_grad = 1.0 - rho_ref;
            coeffs.set(i, j, (surrogate_grad - config.kl_coeff * kl_grad) / n);
        }
    }
    Ok(coeffs)
}

/// Fraction of samples where the min selects the clipped branch strictly.
pub fn clip_fraction(likelihoods: &SampleLikelihoods, advantages: &AdvantageMatrix, clip_epsilon: f64) -> Result<f64> {
    let (g, m) = check_shapes(likelihoods, advantages)?;
    let mut clipped_count = 0usize;
    for i in 0..g {
        for j in 0..m {
            let a = advantages.values.get(i, j);
            let ratio =
                (likelihoods.logprob_current.get(i, j) - likelihoods.logprob_old.get(i, j)).exp();
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
            if clipped * a < ratio * a {
                clipped_count += 1;
            }
        }
    }
    Ok(clipped_count as f64 / (g * m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    // Independent oracle: mean/std by direct arithmetic on the raw values,
    // written without reusing the implementation's helper.
    fn oracle_zscores(values: &[f64]) -> Vec<f64> {
        let n = values.len() as f64;
        let mean: f64 = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        values.iter().map(|v| (v - mean) / std).collect()
    }

    #[test]
    fn one_hot_binary_group() {
        let (adv, flag) = group_normalized_advantage(&[1.0, 0.0, 0.0, 0.0], 1e-6).unwrap();
        assert!(!flag);
        // mean 0.25, population std sqrt(3)/4: winner gets sqrt(3), losers -1/sqrt(3).
        let expected = oracle_zscores(&[1.0, 0.0, 0.0, 0.0]);
        assert_close(expected[0], 3.0f64.sqrt(), 1e-12);
        assert_close(expected[1], -1.0 / 3.0f64.sqrt(), 1e-12);
        for (a, e) in adv.iter().zip(&expected) {
            assert_close(*a, *e, 1e-12);
        }
    }

    #[test]
    fn uniform_group_trips_guard() {
        let (adv, flag) = group_normalized_advantage(&[1.0, 1.0, 1.0, 1.0], 1e-6).unwrap();
        assert!(flag);
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn two_point_group_is_plus_minus_one() {
        let (adv, flag) = group_normalized_advantage(&[0.2, 0.8], 1e-6).unwrap();
        assert!(!flag);
        assert_close(adv[0], -1.0, 1e-12);
        assert_close(adv[1], 1.0, 1e-12);
    }

    #[test]
    fn too_small_group_is_rejected() {
        assert!(matches!(
            group_normalized_advantage(&[1.0], 1e-6),
            Err(Error::InvalidGroup(_))
        ));
        assert!(matches!(
            group_normalized_advantage(&[1.0, f64::NAN], 1e-6),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn mean_only_examples() {
        let adv = mean_only_advantage(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for (a, e) in adv.iter().zip([0.75, -0.25, -0.25, -0.25]) {
            assert_close(*a, e, 1e-12);
        }
        let constant = mean_only_advantage(&[0.7, 0.7, 0.7]).unwrap();
        assert!(constant.iter().all(|a| a.abs() < 1e-12));
        let two = mean_only_advantage(&[0.0, 1.0]).unwrap();
        assert_close(two[0], -0.5, 1e-12);
        assert_close(two[1], 0.5, 1e-12);
        assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn joint_matches_flattened_oracle() {
        let rewards = RewardMatrix::from_flat(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let adv = joint_dual_group_advantage(&rewards, 1e-6).unwrap();
        assert!(!adv.zero_advantage_flag);
        // flatten [1,0,1,0]: mean 0.5, population std 0.5 -> [1,-1,1,-1]
        for (a, e) in adv.values.as_slice().iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert_close(*a, e, 1e-12);
        }
    }

    #[test]
    fn joint_uniform_pool_trips_guard() {
        let rewards = RewardMatrix::from_flat(2, 2, vec![1.0; 4]).unwrap();
        let adv = joint_dual_group_advantage(&rewards, 1e-6).unwrap();
        assert!(adv.zero_advantage_flag);
        assert!(adv.values.as_slice().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn joint_single_variant_reduces_to_group_norm() {
        let column = vec![0.3, 0.9, 0.1, 0.5];
        let rewards = RewardMatrix::from_flat(4, 1, column.clone()).unwrap();
        let joint = joint_dual_group_advantage(&rewards, 1e-6).unwrap();
        let (plain, flag) = group_normalized_advantage(&column, 1e-6).unwrap();
        assert!(!flag && !joint.zero_advantage_flag);
        for (a, b) in joint.values.as_slice().iter().zip(&plain) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn kl_penalty_examples() {
        assert_eq!(kl_penalty(-1.2, -1.2).unwrap(), 0.0);
        // rho = 2: 2 - ln 2 - 1
        let two = kl_penalty(-1.0, -1.0 + 2.0f64.ln()).unwrap();
        assert_close(two, 2.0 - 2.0f64.ln() - 1.0, 1e-12);
        assert_close(two, 0.3068528194400547, 1e-12);
        // rho = 0.5: 0.5 + ln 2 - 1
        let half = kl_penalty(-1.0, -1.0 - 2.0f64.ln()).unwrap();
        assert_close(half, 0.5 + 2.0f64.ln() - 1.0, 1e-12);
        assert_close(half, 0.19314718055994531, 1e-12);
    }

    #[test]
    fn clipped_surrogate_examples() {
        assert_close(clipped_surrogate_term(1.0, 0.7, 0.2).unwrap(), 0.7, 1e-12);
        assert_close(clipped_surrogate_term(1.5, 1.0, 0.2).unwrap(), 1.2, 1e-12);
        assert_close(clipped_surrogate_term(0.5, -1.0, 0.2).unwrap(), -0.8, 1e-12);
        assert!(clipped_surrogate_term(0.0, 1.0, 0.2).is_err());
        assert!(clipped_surrogate_term(-0.5, 1.0, 0.2).is_err());
    }

    fn likelihoods_from(current: Vec<f64>, old: Vec<f64>, refp: Vec<f64>) -> SampleLikelihoods {
        let g = current.len();
        SampleLikelihoods::new(
            Mat::from_vec(g, 1, current).unwrap(),
            Mat::from_vec(g, 1, old).unwrap(),
            Mat::from_vec(g, 1, refp).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn objective_value_examples() {
        let config = GroupConfig {
            kl_coeff: 0.0,
            ..GroupConfig::default()
        };
        // all ratios 1, all A = 0 -> 0
        let lk = likelihoods_from(vec![-1.0, -1.0], vec![-1.0, -1.0], vec![-1.0, -1.0]);
        let adv = AdvantageMatrix {
            values: Mat::zeros(2, 1),
            zero_advantage_flag: true,
        };
        assert_close(objective_value(&lk, &adv, &config).unwrap(), 0.0, 1e-12);

        // single sample, ratio 1, A = 1 -> 1
        let lk1 = likelihoods_from(vec![-0.4], vec![-0.4], vec![-0.4]);
        let adv1 = AdvantageMatrix {
            values: Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            zero_advantage_flag: false,
        };
        assert_close(objective_value(&lk1, &adv1, &config).unwrap(), 1.0, 1e-12);

        // ratios [1.5, 0.5], A [1, -1] -> (1.2 - 0.8) / 2 = 0.2
        let lk2 = likelihoods_from(
            vec![-1.0 + 1.5f64.ln(), -1.0 + 0.5f64.ln()],
            vec![-1.0, -1.0],
            vec![-1.0, -1.0],
        );
        let adv2 = AdvantageMatrix {
            values: Mat::from_vec(2, 1, vec![1.0, -1.0]).unwrap(),
            zero_advantage_flag: false,
        };
        assert_close(objective_value(&lk2, &adv2, &config).unwrap(), 0.2, 1e-12);
    }

    #[test]
    fn gradient_coefficient_examples() {
        let config = GroupConfig {
            kl_coeff: 0.0,
            ..GroupConfig::default()
        };
        let lk = likelihoods_from(vec![-0.5], vec![-0.5], vec![-0.5]);
        let adv = AdvantageMatrix {
            values: Mat::from_vec(1, 1, vec![1.0]).unwrap(),
            zero_advantage_flag: false,
        };
        let coeffs = objective_gradient_coefficients(&lk, &adv, &config).unwrap();
        assert_close(coeffs.get(0, 0), 1.0, 1e-12);

        // clipped branch active -> zero coefficient
        let lk_clip = likelihoods_from(vec![-0.5 + 1.5f64.ln()], vec![-0.5], vec![-0.5]);
        let coeffs = objective_gradient_coefficients(&lk_clip, &adv, &config).unwrap();
        assert_eq!(coeffs.get(0, 0), 0.0);

        // identical current/ref, A = 0, beta > 0 -> KL gradient vanishes at rho = 1
        let config_kl = GroupConfig {
            kl_coeff: 0.04,
            ..GroupConfig::default()
        };
        let adv0 = AdvantageMatrix {
            values: Mat::zeros(1, 1),
            zero_advantage_flag: true,
        };
        let coeffs = objective_gradient_coefficients(&lk, &adv0, &config_kl).unwrap();
        assert_eq!(coeffs.get(0, 0), 0.0);
    }

    #[test]
    fn clip_fraction_counts_strictly_clipped_samples() {
        let config = GroupConfig::default();
        let lk = likelihoods_from(
            vec![-1.0 + 1.5f64.ln(), -1.0],
            vec![-1.0, -1.0],
            vec![-1.0, -1.0],
        );
        let adv = AdvantageMatrix {
            values: Mat::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            zero_advantage_flag: false,
        };
        assert_close(
            clip_fraction(&lk, &adv, config.clip_epsilon).unwrap(),
            0.5,
            1e-12,
        );
    }

    #[test]
    fn objective_rejects_shape_mismatch() {
        let lk = likelihoods_from(vec![-1.0, -1.0], vec![-1.0, -1.0], vec![-1.0, -1.0]);
        let adv = AdvantageMatrix {
            values: Mat::zeros(3, 1),
            zero_advantage_flag: true,
        };
        assert!(matches!(
            objective_value(&lk, &adv, &GroupConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            objective_gradient_coefficients(&lk, &adv, &GroupConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grpo_modes_reject_multiple_variants() {
        let config = GroupConfig {
            advantage_mode: AdvantageMode::Grpo,
            num_variants: 2,
            ..GroupConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
