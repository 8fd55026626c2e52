//! A small 3D encoder–decoder segmentation network trained with explicit
//! reverse-mode differentiation.
//!
//! The network is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod adam;
mod checkpoint;
mod gradcheck;
mod net;
pub mod ops;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use adam::{adam_step, lr_at_epoch, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckLoss, GradCheckReport};
pub use net::{NetConfig, Network, NormKind, ParamEntry, ParamSet, Trace};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {layer}")]
    NonFinite { layer: String },
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Floating-point element type of tensors and parameters.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
