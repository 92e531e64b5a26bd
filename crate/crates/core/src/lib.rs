//! Unified point representations for few-shot instance perception.
//!
//! Every task output (boxes, masks, keypoints, object centres) is an ordered
//! set of 2-D points. This crate provides the codecs into and out of that
//! form, the structure-aware point loss with analytic gradients, a small
//! attention-based point decoder trained by hand-written backpropagation,
//! the evaluation metrics, and a deterministic few-shot episode sampler.

pub mod cli;
pub mod codecs;
pub mod decoder;
pub mod demo;
pub mod episodes;
pub mod flat;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod sapl;
