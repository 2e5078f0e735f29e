//! Desk-scale laboratory for dual-group policy optimization on synthetic
//! video question answering.
//!
//! The crate implements group-relative advantage normalization (per-group
//! z-scores, mean-only centering, and joint normalization over the G x M pool
//! of answer samples times video variants), the clipped surrogate objective
//! with a k3 KL penalty and its analytic gradient, three variant-construction
//! strategies under a fixed frame budget, question-conditioned frame
//! relevance scoring, a linear-softmax toy policy, and a synthetic sparse-
//! evidence environment plus training harness that reproduces the advantage-
//! collapse regime and its mitigation.
//!
//! Everything is deterministic given a master seed: randomness flows through
//! labeled substreams (see [`rng`]), so parallel and sequential execution
//! produce identical results.

pub mod advantage;
pub mod check;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod mat;
pub mod policy;
pub mod rng;
pub mod scoring;
pub mod variants;

pub use advantage::{AdvantageMatrix, AdvantageMode, GroupConfig, RewardMatrix, SampleLikelihoods};
pub use env::{EnvConfig, Episode};
pub use error::{Error, Result};
pub use harness::{MetricsRow, RunConfig, TrainingOutput, VariantMode};
pub use mat::Mat;
pub use policy::{PolicyParams, PolicySnapshot};
pub use scoring::{FrameEmbeddings, FrameScores, QueryEmbedding};
pub use variants::{AugmentParams, SegmentPartition, VariantSpec};
