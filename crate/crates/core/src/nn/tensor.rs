use crate::sampler::Patch;
use crate::volume::{Dims, ProbMap, Spacing};

use super::{NnError, Scalar};

/// Channel-major activation tensor `(channels, nx, ny, nz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self { channels, dims, data: vec![F::zero(); channels * dims.len()] }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<F>) -> Result<Self, NnError> {
        if data.len() != channels * dims.len() {
            return Err(NnError::Shape(format!(
                "{} values for {channels}x{dims:?}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Image and prior channels of a patch.
    pub fn from_patch(patch: &Patch) -> Self {
        let data = patch
            .image
            .iter()
            .chain(&patch.prior)
            .map(|&v| F::of(f64::from(v)))
            .collect();
        Self { channels: 2, dims: patch.dims, data }
    }

    pub fn from_f32(channels: usize, dims: Dims, values: &[f32]) -> Result<Self, NnError> {
        Self::from_vec(channels, dims, values.iter().map(|&v| F::of(f64::from(v))).collect())
    }

    pub fn from_probmap(p: &ProbMap) -> Self {
        Self {
            channels: p.channels(),
            dims: p.dims(),
            data: p.probs().iter().map(|&v| F::of(v)).collect(),
        }
    }

    /// Interprets a softmax output as a probability map. Channel sums are
    /// renormalized in `f64` to absorb single-precision rounding.
    pub fn to_probmap(&self, spacing: Spacing) -> ProbMap {
        let n = self.dims.len();
        let mut probs: Vec<f64> = self.data.iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
        for i in 0..n {
            let s: f64 = (0..self.channels).map(|c| probs[c * n + i]).sum();
            for c in 0..self.channels {
                probs[c * n + i] /= s;
            }
        }
        ProbMap::from_normalized(self.dims, spacing, self.channels, probs)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
