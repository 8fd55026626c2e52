//! Unsupervised adaptation of organ segmentation from contrast-enhanced to
//! non-contrast volumes.
//!
//! The crate is organized bottom-up:
//!
//! - [`volume`] and [`mvol`]: voxel grids, label maps, probability maps and
//!   their on-disk format.
//! - [`phantom`]: deterministic paired contrast/non-contrast phantoms.
//! - [`sampler`]: organ-aware patch sampling and majority-vote fusion.
//! - [`nn`]: a small 3D encoder-decoder with hand-written backpropagation,
//!   Adam and checkpoints.
//! - [`adapt`]: pseudo-label sharpening, cross-domain mixing, the training
//!   losses and the staged trainer.
//! - [`metrics`]: Dice, mean surface distance and the Wilcoxon signed-rank
//!   test.
//! - [`inference`]: full-volume segmentation from patch predictions.

pub mod adapt;
pub mod inference;
pub mod metrics;
pub mod mvol;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod volume;

pub use volume::{Dims, LabelMap, ProbMap, Spacing, Volume};
