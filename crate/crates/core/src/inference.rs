//! Full-volume segmentation from patch predictions.

use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;
use thiserror::Error;

use crate::nn::{Network, NnError, Tensor};
use crate::sampler::{crop_labels, dominant_organ, extract_context_patch, extract_patch, fuse_majority_vote, grid_centers, sample_centers, Patch, PatchGeometry, SamplerError};
use crate::volume::{one_hot_encode, Dims, LabelMap, ProbMap, Volume};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("predictor returned {found:?}, expected {expected:?}")]
    WrongShape { expected: Dims, found: Dims },
}

/// Anything that maps a two-channel patch to class probabilities.
pub trait PatchPredictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, patch: &Patch) -> Result<ProbMap, InferenceError>;
}

/// A trained patch network. Patches whose extents the network cannot
/// down-sample are zero-padded (with a one-time warning).
pub struct NetPredictor<'a> {
    net: &'a Network<f32>,
    warned: AtomicBool,
}

impl<'a> NetPredictor<'a> {
    pub fn new(net: &'a Network<f32>) -> Self {
        Self { net, warned: AtomicBool::new(false) }
    }
}

impl PatchPredictor for NetPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.net.config.num_classes
    }

    fn predict(&self, patch: &Patch) -> Result<ProbMap, InferenceError> {
        let input = Tensor::<f32>::from_patch(patch);
        let m = self.net.config.spatial_multiple();
        if patch.dims.as_array().iter().any(|d| d % m != 0) && !self.warned.swap(true, Ordering::Relaxed) {
            warn!("patch extents {:?} are not multiples of {m}; padding inputs", patch.dims);
        }
        let out = self.net.forward_padded(&input)?;
        Ok(out.to_probmap(crate::Spacing::default()))
    }
}

/// Test double that answers with the one-hot labels of a reference map
/// around each patch center.
pub struct LabelPredictor<'a> {
    pub labels: &'a LabelMap,
}

impl PatchPredictor for LabelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    fn predict(&self, patch: &Patch) -> Result<ProbMap, InferenceError> {
        Ok(one_hot_encode(&crop_labels(self.labels, patch.center, patch.dims)))
    }
}

/// Most frequent organ label of `prior` inside the box, if any.
/// Centers visited by [`segment_volume`]: the overlapping grid followed by
/// `centers_per_organ` prior-guided centers for each organ present.
pub fn inference_centers(prior: &LabelMap, geometry: &PatchGeometry, seed: u64) -> Result<Vec<([usize; 3], Option<u8>)>, InferenceError> {
    let pd = geometry.patch_dims;
    let mut out: Vec<([usize; 3], Option<u8>)> = grid_centers(prior.dims(), pd)
        .into_iter()
        .map(|c| (c, dominant_organ(prior, c, pd)))
        .collect();
    for &organ in &geometry.organs {
        match sample_centers(prior, organ, geometry.centers_per_organ, seed) {
            Ok(cs) => out.extend(cs.into_iter().map(|c| (c, Some(organ)))),
            Err(SamplerError::OrganEmpty(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Segments `image` (already intensity-normalized) by fusing patch
/// predictions with a per-voxel majority vote.
pub fn segment_volume(
    predictor: &dyn PatchPredictor,
    image: &Volume,
    prior: &LabelMap,
    geometry: &PatchGeometry,
    seed: u64,
) -> Result<LabelMap, InferenceError> {
    let pd = geometry.patch_dims;
    let mut preds = Vec::new();
    for (center, organ) in inference_centers(prior, geometry, seed)? {
        let patch = match organ {
            Some(o) => extract_patch(image, prior, center, pd, o)?,
            None => extract_context_patch(image, prior, center, pd)?,
        };
        let p = predictor.predict(&patch)?;
        if p.dims() != pd {
            return Err(InferenceError::WrongShape { expected: pd, found: p.dims() });
        }
        preds.push((p, center));
    }
    Ok(fuse_majority_vote(&preds, image.dims(), image.spacing(), predictor.num_classes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use crate::phantom::{generate_pair, PhantomConfig};

    #[test]
    fn label_predictor_reproduces_labels() {
        let cfg = PhantomConfig { num_subjects: 2, ..PhantomConfig::default() };
        let s = generate_pair(&cfg, 1).unwrap();
        let geom = PatchGeometry::desk_scale(cfg.organ_ids());
        let out = segment_volume(&LabelPredictor { labels: &s.truth }, &s.target, &s.truth, &geom, 3).unwrap();
        assert_eq!(out, s.truth);
    }

    #[test]
    fn dominant_organ_prefers_largest() {
        let d = Dims::new(4, 1, 1);
        let l = LabelMap::new(d, crate::Spacing::default(), 4, vec![3, 2, 2, 0]).unwrap();
        assert_eq!(dominant_organ(&l, [1, 0, 0], Dims::new(4, 1, 1)), Some(2));
        let bg = LabelMap::background(d, crate::Spacing::default(), 4).unwrap();
        assert_eq!(dominant_organ(&bg, [1, 0, 0], Dims::new(4, 1, 1)), None);
    }

    #[test]
    fn network_segmentation_is_deterministic_and_shaped() {
        let cfg = PhantomConfig { num_subjects: 1, ..PhantomConfig::default().scaled(0.5) };
        let s = generate_pair(&cfg, 0).unwrap();
        let net = Network::<f32>::init(NetConfig::desk_scale(2, cfg.num_classes()), 1).unwrap();
        let geom = PatchGeometry { patch_dims: Dims::new(10, 10, 6), centers_per_organ: 2, organs: cfg.organ_ids() };
        let a = segment_volume(&NetPredictor::new(&net), &s.target, &s.truth, &geom, 0).unwrap();
        let b = segment_volume(&NetPredictor::new(&net), &s.target, &s.truth, &geom, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), s.target.dims());
    }
}
