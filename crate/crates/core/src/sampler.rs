//! Organ-aware patch sampling and majority-vote fusion.

use rand::Rng;
use thiserror::Error;

use crate::rng::stream;
use crate::volume::{Dims, LabelMap, ProbMap, Spacing, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("organ class {0} is absent from the prior")]
    OrganEmpty(u8),
    #[error("center {center:?} lies outside volume {dims:?}")]
    CenterOutside { center: [usize; 3], dims: Dims },
    #[error("image dims {0:?} and prior dims {1:?} differ")]
    DimsMismatch(Dims, Dims),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGeometry {
    pub patch_dims: Dims,
    pub centers_per_organ: usize,
    pub organs: Vec<u8>,
}

impl PatchGeometry {
    /// 24×24×12 patches, 8 centers per organ.
    pub fn desk_scale(organs: Vec<u8>) -> Self {
        Self { patch_dims: Dims::new(24, 24, 12), centers_per_organ: 8, organs }
    }
}

/// Two-channel patch: normalized image and binary prior of one organ.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub dims: Dims,
    pub image: Vec<f32>,
    pub prior: Vec<f32>,
    pub center: [usize; 3],
    pub organ: u8,
    pub domain: Domain,
    pub subject: usize,
}

impl Patch {
    /// Both channels back to back, image first.
    pub fn channels(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(2 * self.dims.len());
        v.extend_from_slice(&self.image);
        v.extend_from_slice(&self.prior);
        v
    }
}

/// First voxel of the box of extent `dims` around `center`. For even
/// extents the extra voxel falls on the positive side.
pub fn box_origin(center: [usize; 3], dims: Dims) -> [i64; 3] {
    let d = dims.as_array();
    [0, 1, 2].map(|a| center[a] as i64 - ((d[a] as i64 - 1) / 2))
}

/// `n` voxels drawn uniformly, with replacement, from the region where
/// `prior == organ`.
pub fn sample_centers(prior: &LabelMap, organ: u8, n: usize, seed: u64) -> Result<Vec<[usize; 3]>, SamplerError> {
    let region: Vec<usize> = prior
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == organ)
        .map(|(i, _)| i)
        .collect();
    if region.is_empty() {
        return Err(SamplerError::OrganEmpty(organ));
    }
    let mut rng = stream(seed, "centers", u64::from(organ));
    let dims = prior.dims();
    Ok((0..n).map(|_| dims.coords(region[rng.random_range(0..region.len())])).collect())
}

/// Organ with the most prior voxels inside the box, ties toward the lowest
/// id; `None` when the box holds background only.
pub fn dominant_organ(prior: &LabelMap, center: [usize; 3], patch_dims: Dims) -> Option<u8> {
    let crop = crop_labels(prior, center, patch_dims);
    let mut counts = vec![0usize; prior.num_classes()];
    for &l in crop.labels() {
        counts[usize::from(l)] += 1;
    }
    let mut best: Option<usize> = None;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > 0 && best.is_none_or(|b| n > counts[b]) {
            best = Some(c);
        }
    }
    best.map(|b| b as u8)
}

/// Patch at an arbitrary (grid) center: the prior channel flags the
/// dominant organ of the box, or is all zero when there is none.
pub fn extract_context_patch(image: &Volume, prior: &LabelMap, center: [usize; 3], patch_dims: Dims) -> Result<Patch, SamplerError> {
    match dominant_organ(prior, center, patch_dims) {
        Some(organ) => extract_patch(image, prior, center, patch_dims, organ),
        None => {
            let mut patch = extract_patch(image, prior, center, patch_dims, 0)?;
            patch.prior.iter_mut().for_each(|v| *v = 0.0);
            Ok(patch)
        }
    }
}

/// Crops a box of `patch_dims` around `center`. Image voxels outside the
/// volume are zero; prior voxels outside are background.
pub fn extract_patch(
    image: &Volume,
    prior: &LabelMap,
    center: [usize; 3],
    patch_dims: Dims,
    organ: u8,
) -> Result<Patch, SamplerError> {
    let dims = image.dims();
    if prior.dims() != dims {
        return Err(SamplerError::DimsMismatch(dims, prior.dims()));
    }
    if center[0] >= dims.nx || center[1] >= dims.ny || center[2] >= dims.nz {
        return Err(SamplerError::CenterOutside { center, dims });
    }
    let origin = box_origin(center, patch_dims);
    let mut img = vec![0.0f32; patch_dims.len()];
    let mut pri = vec![0.0f32; patch_dims.len()];
    for z in 0..patch_dims.nz {
        for y in 0..patch_dims.ny {
            for x in 0..patch_dims.nx {
                let p = [origin[0] + x as i64, origin[1] + y as i64, origin[2] + z as i64];
                if let Some(src) = dims.checked_index(p) {
                    let dst = patch_dims.index(x, y, z);
                    img[dst] = image.data()[src];
                    if prior.labels()[src] == organ {
                        pri[dst] = 1.0;
                    }
                }
            }
        }
    }
    Ok(Patch {
        dims: patch_dims,
        image: img,
        prior: pri,
        center,
        organ,
        domain: Domain::Source,
        subject: 0,
    })
}

/// Labels of `labels` inside the box; background outside the volume.
pub fn crop_labels(labels: &LabelMap, center: [usize; 3], patch_dims: Dims) -> LabelMap {
    let dims = labels.dims();
    let origin = box_origin(center, patch_dims);
    let mut out = vec![0u8; patch_dims.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = patch_dims.coords(i);
        let p = [origin[0] + c[0] as i64, origin[1] + c[1] as i64, origin[2] + c[2] as i64];
        if let Some(src) = dims.checked_index(p) {
            *o = labels.labels()[src];
        }
    }
    LabelMap::new(patch_dims, labels.spacing(), labels.num_classes(), out)
        .expect("crop keeps the class range")
}

/// Centers of a regular grid of boxes with 50% overlap per axis that
/// covers the whole volume.
pub fn grid_centers(volume: Dims, patch_dims: Dims) -> Vec<[usize; 3]> {
    let axis = |n: usize, p: usize| -> Vec<usize> {
        if p >= n {
            return vec![(n - 1) / 2];
        }
        let stride = (p / 2).max(1);
        let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + p < n).collect();
        starts.push(n - p);
        starts.dedup();
        starts.into_iter().map(|s| s + (p - 1) / 2).collect()
    };
    let (xs, ys, zs) = (
        axis(volume.nx, patch_dims.nx),
        axis(volume.ny, patch_dims.ny),
        axis(volume.nz, patch_dims.nz),
    );
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

fn accumulate_votes(predictions: &[(ProbMap, [usize; 3])], dims: Dims, num_classes: usize) -> Vec<u32> {
    let n = dims.len();
    let mut votes = vec![0u32; n * num_classes];
    for (pred, center) in predictions {
        let pd = pred.dims();
        let origin = box_origin(*center, pd);
        for i in 0..pd.len() {
            let c = pd.coords(i);
            let p = [origin[0] + c[0] as i64, origin[1] + c[1] as i64, origin[2] + c[2] as i64];
            if let Some(dst) = dims.checked_index(p) {
                let class = usize::from(pred.argmax_at(i)).min(num_classes - 1);
                votes[class * n + dst] += 1;
            }
        }
    }
    votes
}

/// Number of votes cast at each voxel.
pub fn vote_counts(predictions: &[(ProbMap, [usize; 3])], dims: Dims, num_classes: usize) -> Vec<u32> {
    let votes = accumulate_votes(predictions, dims, num_classes);
    let n = dims.len();
    (0..n).map(|i| (0..num_classes).map(|c| votes[c * n + i]).sum()).collect()
}

/// Per-voxel plurality vote over patch argmax labels. Ties go to the lowest
/// class; voxels no patch covers are background.
pub fn fuse_majority_vote(
    predictions: &[(ProbMap, [usize; 3])],
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
) -> LabelMap {
    let n = dims.len();
    let votes = accumulate_votes(predictions, dims, num_classes);
    let labels = (0..n)
        .map(|i| {
            let mut best = 0usize;
            for c in 1..num_classes {
                if votes[c * n + i] > votes[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(dims, spacing, num_classes, labels).expect("vote labels are in range")
}
