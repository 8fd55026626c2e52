//! Convex mixing of a batch with a shuffled copy of itself.

use rand::seq::SliceRandom;

use crate::nn::Tensor;
use crate::rng::stream;

/// One batch element: network input and its soft supervision target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixItem {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Seeded permutation of `0..n`.
pub fn mix_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream(seed, "mix", 0));
    p
}

fn lerp(a: &Tensor<f32>, b: &Tensor<f32>, h: f64) -> Tensor<f32> {
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (h * f64::from(x) + (1.0 - h) * f64::from(y)) as f32)
        .collect();
    Tensor { channels: a.channels, dims: a.dims, data }
}

/// `x'_i = h·x_i + (1−h)·x_{π(i)}` and likewise for the targets, with one
/// weight shared by the whole batch.
pub fn mix_batch(batch: &[MixItem], h: f64, seed: u64) -> Vec<MixItem> {
    mix_batch_per_sample(batch, &vec![h; batch.len()], seed)
}

/// As [`mix_batch`] with a separate weight per element.
pub fn mix_batch_per_sample(batch: &[MixItem], h: &[f64], seed: u64) -> Vec<MixItem> {
    assert_eq!(batch.len(), h.len(), "one weight per batch element");
    let perm = mix_permutation(batch.len(), seed);
    batch
        .iter()
        .zip(&perm)
        .zip(h)
        .map(|((item, &j), &w)| {
            let other = &batch[j];
            MixItem { input: lerp(&item.input, &other.input, w), target: lerp(&item.target, &other.target, w) }
        })
        .collect()
}
