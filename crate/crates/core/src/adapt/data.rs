//! Loading subjects for training and building coarse priors.

use std::path::Path;

use crate::mvol;
use crate::nn::{Network, Tensor};
use crate::phantom::{degrade_prior, source_file, target_file, truth_file};
use crate::rng::derive_seed;
use crate::volume::{argmax_labels, window_and_normalize, Dims, LabelMap, Volume};

use super::TrainError;

/// Soft-tissue intensity window in HU.
pub const HU_WINDOW: (f32, f32) = (-175.0, 250.0);

/// One training subject, intensities already windowed to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub index: usize,
    pub source: Volume,
    pub target: Option<Volume>,
    /// Source-frame labels; never loaded for the adaptation stage.
    pub truth: Option<LabelMap>,
    pub prior: Option<LabelMap>,
}

/// Where the coarse prior comes from.
#[derive(Debug, Clone)]
pub enum PriorSource {
    /// No prior (coarse-model training).
    None,
    /// Degraded ground truth.
    Oracle { dilation_radius: usize, flip_fraction: f64, seed: u64 },
    /// A trained coarse model applied to the source volume.
    Coarse(Network<f32>),
}

pub fn normalize_hu(v: &Volume) -> Volume {
    window_and_normalize(v, HU_WINDOW.0, HU_WINDOW.1).expect("fixed window is valid")
}

/// Averages 2×2×2 blocks; odd extents are rounded up and the missing
/// voxels ignored.
pub fn downsample_volume(v: &Volume) -> Volume {
    let d = v.dims();
    let nd = Dims::from_array(d.as_array().map(|n| n.div_ceil(2)));
    let mut out = vec![0.0f32; nd.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let [x, y, z] = nd.coords(i);
        let (mut sum, mut count) = (0.0f64, 0u32);
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = [(2 * x + dx) as i64, (2 * y + dy) as i64, (2 * z + dz) as i64];
                    if let Some(j) = d.checked_index(p) {
                        sum += f64::from(v.data()[j]);
                        count += 1;
                    }
                }
            }
        }
        *o = (sum / f64::from(count)) as f32;
    }
    let s = v.spacing();
    let spacing = crate::Spacing::new(2.0 * s.dx, 2.0 * s.dy, 2.0 * s.dz).expect("doubled spacing is valid");
    Volume::new(nd, spacing, out).expect("finite averages")
}

/// Most frequent label of each 2×2×2 block, lowest class on ties.
pub fn downsample_labels(l: &LabelMap) -> LabelMap {
    let d = l.dims();
    let nd = Dims::from_array(d.as_array().map(|n| n.div_ceil(2)));
    let c = l.num_classes();
    let mut out = vec![0u8; nd.len()];
    let mut votes = vec![0u8; c];
    for (i, o) in out.iter_mut().enumerate() {
        let [x, y, z] = nd.coords(i);
        votes.iter_mut().for_each(|v| *v = 0);
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = [(2 * x + dx) as i64, (2 * y + dy) as i64, (2 * z + dz) as i64];
                    if let Some(j) = d.checked_index(p) {
                        votes[usize::from(l.labels()[j])] += 1;
                    }
                }
            }
        }
        let mut best = 0;
        for (k, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = k;
            }
        }
        *o = best as u8;
    }
    let s = l.spacing();
    let spacing = crate::Spacing::new(2.0 * s.dx, 2.0 * s.dy, 2.0 * s.dz).expect("doubled spacing is valid");
    LabelMap::new(nd, spacing, c, out).expect("votes stay in range")
}

/// Nearest-neighbour up-sampling onto `dims` with `spacing`.
pub fn upsample_labels(l: &LabelMap, dims: Dims, spacing: crate::Spacing) -> LabelMap {
    let ld = l.dims();
    let labels = (0..dims.len())
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            l.get((x / 2).min(ld.nx - 1), (y / 2).min(ld.ny - 1), (z / 2).min(ld.nz - 1))
        })
        .collect();
    LabelMap::new(dims, spacing, l.num_classes(), labels).expect("labels stay in range")
}

/// Coarse segmentation of a normalized full-resolution volume.
pub fn coarse_prior(model: &Network<f32>, normalized: &Volume) -> Result<LabelMap, TrainError> {
    let small = downsample_volume(normalized);
    let input = Tensor::from_f32(1, small.dims(), small.data())?;
    let probs = model.forward_padded(&input)?;
    let low = argmax_labels(&probs.to_probmap(small.spacing()));
    Ok(upsample_labels(&low, normalized.dims(), normalized.spacing()))
}

/// Reads subjects from a dataset directory.
///
/// Label files are opened only when `with_truth` is set or the prior is
/// derived from ground truth.
pub fn load_subjects(
    dir: &Path,
    indices: &[usize],
    with_target: bool,
    with_truth: bool,
    prior: &PriorSource,
) -> Result<Vec<SubjectData>, TrainError> {
    let data_err = |e: mvol::MvolError, f: String| TrainError::Data(format!("{f}: {e}"));
    indices
        .iter()
        .map(|&idx| {
            let read_vol = |name: String| {
                mvol::read_volume(dir.join(&name)).map(|v| normalize_hu(&v)).map_err(|e| data_err(e, name))
            };
            let source = read_vol(source_file(idx))?;
            let target = if with_target { Some(read_vol(target_file(idx))?) } else { None };
            let read_truth = || mvol::read_labels(dir.join(truth_file(idx))).map_err(|e| data_err(e, truth_file(idx)));
            let truth = if with_truth { Some(read_truth()?) } else { None };
            let prior = match prior {
                PriorSource::None => None,
                PriorSource::Oracle { dilation_radius, flip_fraction, seed } => {
                    let t = match &truth {
                        Some(t) => t.clone(),
                        None => read_truth()?,
                    };
                    Some(degrade_prior(&t, *dilation_radius, *flip_fraction, derive_seed(*seed, "prior", idx as u64)))
                }
                PriorSource::Coarse(model) => Some(coarse_prior(model, &source)?),
            };
            Ok(SubjectData { index: idx, source, target, truth, prior })
        })
        .collect()
}
