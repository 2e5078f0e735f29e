//! Spatiotemporal variant construction under a fixed frame budget.
//!
//! Three strategies produce alternative views of a video:
//!
//! - deterministic: strided sampling with staggered starting offsets, so the
//!   variants are pairwise disjoint and jointly cover the video when
//!   `F = budget * M`;
//! - stochastic: a random temporal crop window followed by uniform-stride
//!   selection inside it, with spatial augmentation parameters attached;
//! - importance: the video is split into `budget` near-equal segments and one
//!   frame per segment is drawn by temperature-scaled softmax over per-frame
//!   relevance scores.
//!
//! Everything is pure given an explicit random stream; callers parallelize by
//! handing each call its own substream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Spatial augmentation parameters, recorded rather than rendered: the
/// simulation maps them to a bounded feature-space perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Color jitter strength in [-0.4, 0.4].
    pub color_jitter: f64,
    /// Rotation in degrees, [-5, 5].
    pub rotation_deg: f64,
    /// Translation fraction, [-0.05, 0.05].
    pub translate_frac: f64,
    /// Scale factor, [0.95, 1.05].
    pub scale: f64,
}

impl AugmentParams {
    /// Combined magnitude in [0, 1]: mean of the four normalized strengths.
    pub fn magnitude(&self) -> f64 {
        (self.color_jitter.abs() / 0.4
            + self.rotation_deg.abs() / 5.0
            + self.translate_frac.abs() / 0.05
            + (self.scale - 1.0).abs() / 0.05)
            / 4.0
    }
}

/// Draw augmentation parameters uniformly from their ranges.
pub fn sample_augment_params(rng: &mut ChaCha8Rng) -> AugmentParams {
    AugmentParams {
        color_jitter: rng.gen_range(-0.4..=0.4),
        rotation_deg: rng.gen_range(-5.0..=5.0),
        translate_frac: rng.gen_range(-0.05..=0.05),
        scale: rng.gen_range(0.95..=1.05),
    }
}

/// One video variant: a strictly increasing frame index set plus optional
/// augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub frame_indices: Vec<usize>,
    pub augment: Option<AugmentParams>,
    pub variant_id: usize,
}

impl VariantSpec {
    fn assert_increasing(&self) {
        debug_assert!(
            self.frame_indices.windows(2).all(|w| w[0] < w[1]),
            "frame indices must be strictly increasing"
        );
    }
}

/// Near-equal contiguous partition of `[0, F-1]` into `K` segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPartition {
    /// Inclusive (start, end) bounds per segment.
    pub bounds: Vec<(usize, usize)>,
    /// True when the requested K exceeded F and was clamped down to F.
    pub clamped: bool,
}

/// Strided frame selection with staggered offsets.
///
/// The stride is `max(M, floor(F / budget))`: taking every M-th frame keeps
/// the M variants disjoint, but under a fixed budget the stride must also be
/// wide enough that `budget` frames span the video, so the larger of the two
/// is used.
pub fn deterministic_variant_indices(
    num_frames: usize,
    budget: usize,
    num_variants: usize,
    variant_id: usize,
) -> Result<VariantSpec> {
    if num_frames == 0 || budget == 0 || num_variants == 0 {
        return Err(Error::InvalidConfig(
            "num_frames, budget, and num_variants must be >= 1".into(),
        ));
    }
    if variant_id >= num_variants {
        return Err(Error::InvalidIndex(format!(
            "variant_id {variant_id} out of range 0..{num_variants}"
        )));
    }
    let stride = num_variants.max(num_frames / budget);
    let last = variant_id + (budget - 1) * stride;
    if last > num_frames - 1 {
        return Err(Error::BudgetInfeasible(format!(
            "offset {variant_id} with stride {stride} needs frame {last} but only {num_frames} frames exist"
        )));
    }
    let spec = VariantSpec {
        frame_indices: (0..budget).map(|j| variant_id + j * stride).collect(),
        augment: None,
        variant_id,
    };
    spec.assert_increasing();
    Ok(spec)
}

/// Split `F` frames into `K` near-equal contiguous segments.
///
/// The first `F mod K` segments get `ceil(F/K)` frames, the rest
/// `floor(F/K)`. If `F < K`, K is clamped to F and the result is flagged.
pub fn partition_segments(num_frames: usize, num_segments: usize) -> Result<SegmentPartition> {
    if num_frames == 0 || num_segments == 0 {
        return Err(Error::InvalidConfig(
            "num_frames and num_segments must be >= 1".into(),
        ));
    }
    let clamped = num_segments > num_frames;
    let k = num_segments.min(num_frames);
    let base = num_frames / k;
    let extra = num_frames % k;
    let mut bounds = Vec::with_capacity(k);
    let mut start = 0usize;
    for seg in 0..k {
        let len = if seg < extra { base + 1 } else { base };
        bounds.push((start, start + len - 1));
        start += len;
    }
    debug_assert_eq!(start, num_frames);
    Ok(SegmentPartition { bounds, clamped })
}

/// Temperature-scaled softmax over scores, computed with max subtraction.
pub fn softmax_probabilities(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidTemperature(temperature));
    }
    if scores.is_empty() {
        return Err(Error::InvalidSegment("empty score slice".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidValue("non-finite relevance score".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Inverse-CDF categorical draw from an explicit probability vector.
pub(crate) fn categorical_draw(probabilities: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (idx, p) in probabilities.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return idx;
        }
    }
    probabilities.len() - 1
}

/// Sample one frame index within a segment by softmax over its scores.
///
/// Returns an index local to the slice: `0..scores.len()`.
pub fn sample_segment_frame(scores: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let probs = softmax_probabilities(scores, temperature)?;
    Ok(categorical_draw(&probs, rng))
}

/// Build `M` importance-based variants: one softmax draw per segment, with an
/// independent substream per (variant, segment) derived from `stream_seed`.
///
/// Distinct variants may share indices; sampling is independent across
/// variants to maximize intra-group diversity.
pub fn importance_variant_indices(
    scores: &[f64],
    budget: usize,
    temperature: f64,
    num_variants: usize,
    stream_seed: u64,
) -> Result<Vec<VariantSpec>> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("scores must cover at least one frame".into()));
    }
    let partition = partition_segments(scores.len(), budget)?;
    let mut variants = Vec::with_capacity(num_variants);
    for variant_id in 0..num_variants {
        let mut frame_indices = Vec::with_capacity(partition.bounds.len());
        for (seg, &(start, end)) in partition.bounds.iter().enumerate() {
            let mut seg_rng = rng::substream(stream_seed, &[variant_id as u64, seg as u64]);
            let local = sample_segment_frame(&scores[start..=end], temperature, &mut seg_rng)?;
            frame_indices.push(start + local);
        }
        let spec = VariantSpec {
            frame_indices,
            augment: None,
            variant_id,
        };
        spec.assert_increasing();
        variants.push(spec);
    }
    Ok(variants)
}

/// Uniform-stride selection of `budget` indices inside the inclusive window
/// starting at `start` with `window_len` frames.
fn strided_in_window(start: usize, window_len: usize, budget: usize) -> Vec<usize> {
    if budget == 1 {
        return vec![start];
    }
    let step = (window_len - 1) as f64 / (budget - 1) as f64;
    (0..budget)
        .map(|j| start + (j as f64 * step).round() as usize)
        .collect()
}

/// Stochastic variant with a caller-fixed crop window length.
///
/// The window start is uniform over feasible positions; indices are selected
/// at uniform stride within the window and augmentation parameters are drawn
/// uniformly from their ranges.
pub fn stochastic_variant_in_window(
    num_frames: usize,
    budget: usize,
    window_len: usize,
    variant_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VariantSpec> {
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be >= 1".into()));
    }
    if window_len < budget || window_len > num_frames {
        return Err(Error::BudgetInfeasible(format!(
            "window of {window_len} frames cannot hold budget {budget} within {num_frames} frames"
        )));
    }
    let start = rng.gen_range(0..=num_frames - window_len);
    let spec = VariantSpec {
        frame_indices: strided_in_window(start, window_len, budget),
        augment: Some(sample_augment_params(rng)),
        variant_id,
    };
    spec.assert_increasing();
    Ok(spec)
}

/// Stochastic variant: temporal crop uniform over all feasible windows, then
/// uniform-stride selection inside it, plus augmentation parameters.
///
/// A window is a contiguous `[a, b]` with at least `budget` frames; windows
/// of length L occur in `F - L + 1` positions, so L is drawn with that weight
/// to make every feasible window equally likely.
pub fn stochastic_variant_spec(
    num_frames: usize,
    budget: usize,
    variant_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VariantSpec> {
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be >= 1".into()));
    }
    if num_frames < budget {
        return Err(Error::BudgetInfeasible(format!(
            "budget {budget} exceeds {num_frames} available frames"
        )));
    }
    // Total windows: sum over L = budget..=F of (F - L + 1).
    let spans = num_frames - budget + 1; // number of feasible lengths
    let total = spans * (spans + 1) / 2;
    let mut pick = rng.gen_range(0..total);
    let mut window_len = budget;
    for len in budget..=num_frames {
        let count = num_frames - len + 1;
        if pick < count {
            window_len = len;
            break;
        }
        pick -= count;
    }
    stochastic_variant_in_window(num_frames, budget, window_len, variant_id, rng)
}
