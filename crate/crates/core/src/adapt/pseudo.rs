//! Pseudo-label construction: back-mapped averaging, temperature
//! sharpening and the Beta mixing weight.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use super::augment::Augmentation;
use crate::volume::{argmax_labels, one_hot_encode, ProbMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("all channels are zero at voxel {0}")]
    ZeroMass(usize),
    #[error("beta parameters must be positive, got ({0}, {1})")]
    InvalidBeta(f64, f64),
    #[error("no predictions to average")]
    Empty,
    #[error("predictions disagree in shape")]
    ShapeMismatch,
}

/// Averages predictions made on augmented copies after mapping each back to
/// the original frame. A voxel that some copy shifted out of view averages
/// only over the copies that saw it, and is uniform if none did.
pub fn average_prediction(preds: &[(ProbMap, Augmentation)]) -> Result<ProbMap, PseudoError> {
    let first = &preds.first().ok_or(PseudoError::Empty)?.0;
    let (dims, c) = (first.dims(), first.channels());
    if preds.iter().any(|(p, _)| p.dims() != dims || p.channels() != c) {
        return Err(PseudoError::ShapeMismatch);
    }
    let n = dims.len();
    let mut sum = vec![0.0f64; c * n];
    let mut count = vec![0u32; n];
    for (p, aug) in preds {
        for (orig, aug_idx) in aug.inverse_map(dims).into_iter().enumerate() {
            if let Some(j) = aug_idx {
                count[orig] += 1;
                for ch in 0..c {
                    sum[ch * n + orig] += p.get(ch, j);
                }
            }
        }
    }
    for i in 0..n {
        for ch in 0..c {
            sum[ch * n + i] = if count[i] == 0 { 1.0 / c as f64 } else { sum[ch * n + i] / f64::from(count[i]) };
        }
    }
    Ok(ProbMap::from_normalized(dims, first.spacing(), c, sum))
}

/// `q_i^{1/T} / Σ_j q_j^{1/T}` per voxel, evaluated in log space relative to
/// the largest entry so small temperatures cannot underflow.
pub fn sharpen(q: &ProbMap, t: f64) -> Result<ProbMap, PseudoError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(PseudoError::InvalidTemperature(t));
    }
    let (n, c) = (q.dims().len(), q.channels());
    let mut out = vec![0.0; c * n];
    let mut v = vec![0.0; c];
    for i in 0..n {
        for (ch, slot) in v.iter_mut().enumerate() {
            *slot = q.get(ch, i);
        }
        let sharpened = sharpen_vector(&v, t).ok_or(PseudoError::ZeroMass(i))?;
        for ch in 0..c {
            out[ch * n + i] = sharpened[ch];
        }
    }
    Ok(ProbMap::from_normalized(q.dims(), q.spacing(), c, out))
}

/// Sharpening of a single probability vector; `None` if it has no mass.
pub fn sharpen_vector(q: &[f64], t: f64) -> Option<Vec<f64>> {
    let max = q.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return None;
    }
    if t == 1.0 {
        let s: f64 = q.iter().sum();
        return Some(q.iter().map(|v| v / s).collect());
    }
    let lmax = max.ln();
    let w: Vec<f64> = q
        .iter()
        .map(|&v| if v > 0.0 { ((v.ln() - lmax) / t).exp() } else { 0.0 })
        .collect();
    let s: f64 = w.iter().sum();
    Some(w.iter().map(|x| x / s).collect())
}

/// One-hot map of the per-voxel argmax (ties toward the lowest class).
pub fn harden(q: &ProbMap) -> ProbMap {
    one_hot_encode(&argmax_labels(q))
}

/// One Beta(α, β) draw clamped into the open unit interval.
pub fn sample_beta_weight<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64, PseudoError> {
    let dist = Beta::new(alpha, beta).map_err(|_| PseudoError::InvalidBeta(alpha, beta))?;
    let h: f64 = dist.sample(rng);
    Ok(h.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
}
