//! Minimal differentiable stochastic policy.
//!
//! A linear-softmax head over A answer options, conditioned on the mean
//! feature vector of the frames a variant selects. One categorical draw
//! stands in for multi-token generation, which makes the probability ratio in
//! the surrogate objective a single ratio while still exercising all of the
//! objective math.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::variants::VariantSpec;

/// Role tag for frozen policy snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotRole {
    /// The behavior policy the rollouts were sampled from.
    Old,
    /// The fixed reference policy for the KL penalty.
    Ref,
}

/// Trainable weights of the linear-softmax policy, shape A x D_feat.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Mat,
}

impl PolicyParams {
    /// Zero-initialized policy: uniform over answers for any features.
    pub fn zeros(num_answers: usize, feature_dim: usize) -> Result<Self> {
        if num_answers < 2 || feature_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "policy needs A >= 2 and D_feat >= 1, got {num_answers}x{feature_dim}"
            )));
        }
        Ok(Self {
            weights: Mat::zeros(num_answers, feature_dim),
        })
    }

    pub fn from_weights(weights: Mat) -> Result<Self> {
        if weights.rows() < 2 || weights.cols() == 0 {
            return Err(Error::InvalidConfig(format!(
                "policy needs A >= 2 and D_feat >= 1, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        if !weights.all_finite() {
            return Err(Error::InvalidValue("non-finite policy weights".into()));
        }
        Ok(Self { weights })
    }

    pub fn num_answers(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    /// Immutable copy with a role tag.
    pub fn snapshot(&self, role: SnapshotRole) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
            role,
        }
    }
}

/// Frozen copy of [`PolicyParams`] captured at a point in training.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }
}

/// Mean feature vector of the frames a variant selects, plus the bounded
/// feature-space stand-in for its spatial augmentation.
///
/// The perturbation direction comes from the variant's substream and its L2
/// norm is `0.5 * augment.magnitude() * |features|`, a monotone, bounded
/// proxy for pixel-space augmentation strength.
pub fn aggregate_features(
    episode_frames: &Mat,
    variant: &VariantSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if variant.frame_indices.is_empty() {
        return Err(Error::InvalidIndex("variant selects no frames".into()));
    }
    let dim = episode_frames.cols();
    let mut features = vec![0.0f64; dim];
    for &idx in &variant.frame_indices {
        if idx >= episode_frames.rows() {
            return Err(Error::InvalidIndex(format!(
                "frame index {idx} out of range 0..{}",
                episode_frames.rows()
            )));
        }
        for (acc, v) in features.iter_mut().zip(episode_frames.row(idx)) {
            *acc += v;
        }
    }
    let count = variant.frame_indices.len() as f64;
    for acc in features.iter_mut() {
        *acc /= count;
    }

    if let Some(augment) = &variant.augment {
        let feature_norm = features.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target_norm = 0.5 * augment.magnitude() * feature_norm;
        if target_norm > 0.0 {
            let direction: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let dir_norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            if dir_norm > 0.0 {
                for (f, d) in features.iter_mut().zip(&direction) {
                    *f += d / dir_norm * target_norm;
                }
            }
        }
    }
    Ok(features)
}

fn logits(params: &PolicyParams, features: &[f64]) -> Result<Vec<f64>> {
    params.weights.matvec(features)
}

/// Softmax over answer logits, computed with max subtraction.
pub fn answer_distribution(params: &PolicyParams, features: &[f64]) -> Result<Vec<f64>> {
    let logits = logits(params, features)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Categorical draw from an explicit distribution via inverse CDF.
pub fn sample_answer(distribution: &[f64], rng: &mut ChaCha8Rng) -> usize {
    crate::variants::categorical_draw(distribution, rng)
}

/// Log-probability of `answer` under the policy, computed as
/// `logit_a - logsumexp(logits)`.
pub fn logprob(params: &PolicyParams, features: &[f64], answer: usize) -> Result<f64> {
    let logits = logits(params, features)?;
    if answer >= logits.len() {
        return Err(Error::InvalidIndex(format!(
            "answer {answer} out of range 0..{}",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsumexp = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits[answer] - logsumexp)
}

/// Score-function gradient of the answer log-probability:
/// `(onehot(answer) - softmax(logits)) (x) features`.
pub fn logprob_gradient(params: &PolicyParams, features: &[f64], answer: usize) -> Result<Mat> {
    let probs = answer_distribution(params, features)?;
    if answer >= probs.len() {
        return Err(Error::InvalidIndex(format!(
            "answer {answer} out of range 0..{}",
            probs.len()
        )));
    }
    let mut grad = Mat::zeros(params.num_answers(), params.feature_dim());
    for a in 0..params.num_answers() {
        let coeff = if a == answer { 1.0 - probs[a] } else { -probs[a] };
        for d in 0..params.feature_dim() {
            grad.set(a, d, coeff * features[d]);
        }
    }
    Ok(grad)
}

/// Plain gradient ascent: `weights += learning_rate * gradient`.
///
/// A non-finite gradient rejects the update so the caller can skip the step
/// and log it instead of poisoning the weights.
pub fn apply_update(params: &PolicyParams, gradient: &Mat, learning_rate: f64) -> Result<PolicyParams> {
    if !gradient.all_finite() {
        return Err(Error::UpdateRejected("non-finite gradient".into()));
    }
    if gradient.rows() != params.num_answers() || gradient.cols() != params.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {}x{} vs weights {}x{}",
            gradient.rows(),
            gradient.cols(),
            params.num_answers(),
            params.feature_dim()
        )));
    }
    let mut weights = params.weights.clone();
    weights.add_scaled(gradient, learning_rate)?;
    Ok(PolicyParams { weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn variant(indices: Vec<usize>) -> VariantSpec {
        VariantSpec {
            frame_indices: indices,
            augment: None,
            variant_id: 0,
        }
    }

    #[test]
    fn single_frame_aggregation_is_identity() {
        let frames = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut rng = substream(0, &[0]);
        let f = aggregate_features(&frames, &variant(vec![1]), &mut rng).unwrap();
        assert_eq!(f, vec![3.0, 4.0]);
    }

    #[test]
    fn mean_aggregation_matches_oracle() {
        let frames = Mat::from_vec(
            5,
            3,
            vec![
                0.5, -1.0, 2.0, //
                1.5, 0.0, -2.0, //
                3.0, 3.0, 3.0, //
                -0.5, 1.0, 0.25, //
                2.0, -2.0, 1.0,
            ],
        )
        .unwrap();
        let picks = vec![0, 2, 3, 4];
        let mut rng = substream(0, &[0]);
        let f = aggregate_features(&frames, &variant(picks.clone()), &mut rng).unwrap();
        // Brute-force mean, written independently.
        for d in 0..3 {
            let expected: f64 = picks.iter().map(|&i| frames.get(i, d)).sum::<f64>() / 4.0;
            assert!((f[d] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_aggregation_shifts_norm_boundedly() {
        let frames = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut v = variant(vec![0, 1]);
        v.augment = Some(crate::variants::AugmentParams {
            color_jitter: 0.4,
            rotation_deg: 5.0,
            translate_frac: 0.05,
            scale: 1.05,
        });
        let mut rng = substream(9, &[1]);
        let f = aggregate_features(&frames, &v, &mut rng).unwrap();
        let delta: f64 = ((f[0] - 1.0).powi(2) + f[1].powi(2)).sqrt();
        // magnitude 1.0 -> perturbation norm exactly 0.5 * |features| = 0.5.
        assert!((delta - 0.5).abs() < 1e-9, "perturbation norm {delta}");
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let params = PolicyParams::zeros(4, 3).unwrap();
        let dist = answer_distribution(&params, &[0.3, -0.7, 2.0]).unwrap();
        for p in &dist {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let mut w = Mat::zeros(3, 1);
        w.set(1, 0, 100.0);
        let params = PolicyParams::from_weights(w).unwrap();
        let dist = answer_distribution(&params, &[1.0]).unwrap();
        assert!(dist[1] >= 1.0 - 1e-9);
    }

    #[test]
    fn distribution_matches_softmax_oracle_and_shift_invariance() {
        let w = Mat::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let params = PolicyParams::from_weights(w.clone()).unwrap();
        let x = [0.8, -0.6];
        let dist = answer_distribution(&params, &x).unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|a| w.get(a, 0) * x[0] + w.get(a, 1) * x[1])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (a, p) in dist.iter().enumerate() {
            assert!((p - logits[a].exp() / z).abs() < 1e-12);
        }
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // Shifting every logit by the same constant leaves the distribution
        // unchanged: with x[0] = 1 fixed, adding c to the first weight column
        // adds c to every logit.
        let x1 = [1.0, -0.6];
        let base = answer_distribution(&params, &x1).unwrap();
        let c = 7.25;
        let mut shifted_w = w.clone();
        for a in 0..3 {
            shifted_w.set(a, 0, w.get(a, 0) + c);
        }
        let shifted =
            answer_distribution(&PolicyParams::from_weights(shifted_w).unwrap(), &x1).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12, "logit shift changed the softmax");
        }
    }

    #[test]
    fn deterministic_distribution_always_picks_it() {
        let mut rng = substream(5, &[2]);
        for _ in 0..100 {
            assert_eq!(sample_answer(&[1.0, 0.0, 0.0], &mut rng), 0);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = substream(13, &[3]);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_answer(&[0.25; 4], &mut rng)] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.005, "frequency {freq}");
        }
    }

    #[test]
    fn logprob_of_uniform_five_way() {
        let params = PolicyParams::zeros(5, 2).unwrap();
        let lp = logprob(&params, &[1.0, -1.0], 3).unwrap();
        assert!((lp - 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let w = Mat::from_vec(3, 2, vec![0.4, -0.9, 1.3, 0.2, -0.6, 0.8]).unwrap();
        let params = PolicyParams::from_weights(w.clone()).unwrap();
        let x = [0.7, -1.1];
        let answer = 2;
        let grad = logprob_gradient(&params, &x, answer).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            for d in 0..2 {
                let mut wp = w.clone();
                wp.set(a, d, w.get(a, d) + h);
                let mut wm = w.clone();
                wm.set(a, d, w.get(a, d) - h);
                let lp_plus = logprob(&PolicyParams::from_weights(wp).unwrap(), &x, answer).unwrap();
                let lp_minus =
                    logprob(&PolicyParams::from_weights(wm).unwrap(), &x, answer).unwrap();
                let fd = (lp_plus - lp_minus) / (2.0 * h);
                let analytic = grad.get(a, d);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    ((fd - analytic) / denom).abs() < 1e-5,
                    "({a},{d}): fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn saturated_policy_gradient_vanishes() {
        let mut w = Mat::zeros(2, 1);
        w.set(0, 0, 50.0);
        w.set(1, 0, -50.0);
        let params = PolicyParams::from_weights(w).unwrap();
        let grad = logprob_gradient(&params, &[1.0], 0).unwrap();
        assert!(grad.frobenius_norm() < 1e-6);
    }

    #[test]
    fn zero_features_zero_gradient() {
        let params = PolicyParams::zeros(3, 2).unwrap();
        let grad = logprob_gradient(&params, &[0.0, 0.0], 1).unwrap();
        assert_eq!(grad.frobenius_norm(), 0.0);
    }

    #[test]
    fn apply_update_arithmetic() {
        let params = PolicyParams::zeros(2, 1).unwrap();
        let mut g = Mat::zeros(2, 1);
        g.set(0, 0, 2.0);
        let updated = apply_update(&params, &g, 0.5).unwrap();
        assert_eq!(updated.weights().get(0, 0), 1.0);
        assert_eq!(updated.weights().get(1, 0), 0.0);

        let unchanged = apply_update(&params, &Mat::zeros(2, 1), 0.5).unwrap();
        assert_eq!(unchanged.weights(), params.weights());
        let lr_zero = apply_update(&updated, &g, 0.0).unwrap();
        assert_eq!(lr_zero.weights(), updated.weights());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let params = PolicyParams::zeros(2, 1).unwrap();
        let mut g = Mat::zeros(2, 1);
        g.set(0, 0, f64::NAN);
        assert!(matches!(
            apply_update(&params, &g, 0.1),
            Err(Error::UpdateRejected(_))
        ));
    }

    #[test]
    fn sampling_replay_is_reproducible() {
        let dist = [0.1, 0.2, 0.3, 0.4];
        let a: Vec<usize> = {
            let mut rng = substream(31, &[7]);
            (0..50).map(|_| sample_answer(&dist, &mut rng)).collect()
        };
        let b: Vec<usize> = {
            let mut rng = substream(31, &[7]);
            (0..50).map(|_| sample_answer(&dist, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }
}
