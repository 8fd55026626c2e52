//! Paired spatial/intensity augmentation with recorded inverses.

use rand::Rng;

use crate::nn::{Scalar, Tensor};
use crate::rng::stream;
use crate::sampler::Patch;
use crate::volume::Dims;

/// Largest integer translation per axis, in voxels.
pub const MAX_SHIFT: i64 = 2;
pub const INTENSITY_RANGE: (f32, f32) = (0.9, 1.1);

/// One draw: flip, then translate; the image channel is also scaled.
///
/// A voxel `p` of the augmented patch reads the original at
/// `flip(p − shift)`; voxels that read outside the patch are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: [bool; 3],
    pub shift: [i64; 3],
    pub intensity: f32,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self { flip: [false; 3], shift: [0; 3], intensity: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = [rng.random::<bool>(), rng.random::<bool>(), rng.random::<bool>()];
        let shift = [0; 3].map(|_: i64| rng.random_range(-MAX_SHIFT..=MAX_SHIFT));
        let intensity = rng.random_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1);
        Self { flip, shift, intensity }
    }

    /// Original-frame voxel read by augmented voxel `p`, if inside.
    fn source_of(&self, p: [usize; 3], dims: Dims) -> Option<usize> {
        let d = dims.as_array();
        let mut q = [0i64; 3];
        for a in 0..3 {
            let v = p[a] as i64 - self.shift[a];
            if v < 0 || v >= d[a] as i64 {
                return None;
            }
            q[a] = if self.flip[a] { d[a] as i64 - 1 - v } else { v };
        }
        Some(dims.index(q[0] as usize, q[1] as usize, q[2] as usize))
    }

    /// For every augmented voxel, the original voxel it shows.
    pub fn forward_map(&self, dims: Dims) -> Vec<Option<usize>> {
        (0..dims.len()).map(|i| self.source_of(dims.coords(i), dims)).collect()
    }

    /// For every original voxel, the augmented voxel showing it.
    pub fn inverse_map(&self, dims: Dims) -> Vec<Option<usize>> {
        let mut inv = vec![None; dims.len()];
        for (p, q) in self.forward_map(dims).into_iter().enumerate() {
            if let Some(q) = q {
                inv[q] = Some(p);
            }
        }
        inv
    }

    /// Applies the transform to both channels; intensity only to the image.
    pub fn apply(&self, patch: &Patch) -> Patch {
        let map = self.forward_map(patch.dims);
        let mut out = patch.clone();
        for (p, q) in map.iter().enumerate() {
            match q {
                Some(q) => {
                    out.image[p] = patch.image[*q] * self.intensity;
                    out.prior[p] = patch.prior[*q];
                }
                None => {
                    out.image[p] = 0.0;
                    out.prior[p] = 0.0;
                }
            }
        }
        out
    }

    /// Spatially transforms every channel of `t` (no intensity change).
    pub fn apply_tensor<F: Scalar>(&self, t: &Tensor<F>) -> Tensor<F> {
        let map = self.forward_map(t.dims);
        let n = t.dims.len();
        let mut out = Tensor::zeros(t.channels, t.dims);
        for c in 0..t.channels {
            for (p, q) in map.iter().enumerate() {
                if let Some(q) = q {
                    out.data[c * n + p] = t.data[c * n + q];
                }
            }
        }
        out
    }
}

/// `k` independent augmentations of `patch`, deterministic in `seed`.
pub fn augment_k(patch: &Patch, k: usize, seed: u64) -> Vec<(Patch, Augmentation)> {
    let mut rng = stream(seed, "augment", 0);
    (0..k)
        .map(|_| {
            let a = Augmentation::draw(&mut rng);
            (a.apply(patch), a)
        })
        .collect()
}
