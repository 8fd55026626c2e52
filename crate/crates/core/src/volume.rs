//! Volumetric data types and preprocessing.
//!
//! All grids are stored x-fastest, z-slowest: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`. Multi-channel data (probability
//! maps, network tensors) is channel-major, one contiguous grid per channel.

use thiserror::Error;

/// Tolerance on the per-voxel channel sum of a [`ProbMap`].
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("invalid window: lo {lo} must be below hi {hi}")]
    InvalidWindow { lo: f32, hi: f32 },
    #[error("invalid spacing ({0}, {1}, {2}): all components must be positive and finite")]
    InvalidSpacing(f32, f32, f32),
    #[error("zero-sized dimension in {0:?}")]
    ZeroDims(Dims),
    #[error("data length {got} does not match {expected} for {what}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("class count {0} outside 2..=255")]
    InvalidClassCount(usize),
    #[error("label {label} at voxel {index} is not below class count {classes}")]
    LabelOutOfRange { index: usize, label: u8, classes: u8 },
    #[error("probability map violates the simplex constraint at voxel {0}")]
    NotNormalized(usize),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
}

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        [x, y, z]
    }

    /// Linear index of a signed coordinate, or `None` when outside the grid.
    #[inline]
    pub fn checked_index(&self, p: [i64; 3]) -> Option<usize> {
        if p[0] < 0 || p[1] < 0 || p[2] < 0 {
            return None;
        }
        let (x, y, z) = (p[0] as usize, p[1] as usize, p[2] as usize);
        if x >= self.nx || y >= self.ny || z >= self.nz {
            return None;
        }
        Some(self.index(x, y, z))
    }

    /// Central voxel; for even extents this is the lower of the two middles.
    pub fn center(&self) -> [usize; 3] {
        [
            self.nx.saturating_sub(1) / 2,
            self.ny.saturating_sub(1) / 2,
            self.nz.saturating_sub(1) / 2,
        ]
    }
}

/// Physical voxel edge lengths in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub dx: f32,
    pub dy: f32,
    pub dz: f32,
}

impl Spacing {
    pub fn new(dx: f32, dy: f32, dz: f32) -> Result<Self, VoxelError> {
        let ok = |v: f32| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Self { dx, dy, dz })
        } else {
            Err(VoxelError::InvalidSpacing(dx, dy, dz))
        }
    }

    pub const fn isotropic() -> Self {
        Self { dx: 1.0, dy: 1.0, dz: 1.0 }
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [f64::from(self.dx), f64::from(self.dy), f64::from(self.dz)]
    }
}

impl Default for Spacing {
    /// In-plane 0.68 mm with 3 mm slices.
    fn default() -> Self {
        Self { dx: 0.68, dy: 0.68, dz: 3.0 }
    }
}

fn check_dims(dims: Dims) -> Result<(), VoxelError> {
    if dims.is_empty() {
        Err(VoxelError::ZeroDims(dims))
    } else {
        Ok(())
    }
}

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self, VoxelError> {
        check_dims(dims)?;
        Spacing::new(spacing.dx, spacing.dy, spacing.dz)?;
        if data.len() != dims.len() {
            return Err(VoxelError::LengthMismatch {
                what: "volume",
                expected: dims.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VoxelError::NonFinite(i));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self, VoxelError> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// Per-voxel class indices; class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        num_classes: usize,
        labels: Vec<u8>,
    ) -> Result<Self, VoxelError> {
        check_dims(dims)?;
        Spacing::new(spacing.dx, spacing.dy, spacing.dz)?;
        if !(2..=255).contains(&num_classes) {
            return Err(VoxelError::InvalidClassCount(num_classes));
        }
        if labels.len() != dims.len() {
            return Err(VoxelError::LengthMismatch {
                what: "label map",
                expected: dims.len(),
                got: labels.len(),
            });
        }
        let classes = num_classes as u8;
        if let Some(index) = labels.iter().position(|&l| l >= classes) {
            return Err(VoxelError::LabelOutOfRange { index, label: labels[index], classes });
        }
        Ok(Self { dims, spacing, num_classes: classes, labels })
    }

    pub fn background(dims: Dims, spacing: Spacing, num_classes: usize) -> Result<Self, VoxelError> {
        Self::new(dims, spacing, num_classes, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        usize::from(self.num_classes)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Binary mask of voxels carrying `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Per-voxel class probabilities, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    spacing: Spacing,
    channels: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Validates range and channel sums.
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        channels: usize,
        probs: Vec<f64>,
    ) -> Result<Self, VoxelError> {
        check_dims(dims)?;
        if channels < 2 {
            return Err(VoxelError::InvalidClassCount(channels));
        }
        if probs.len() != dims.len() * channels {
            return Err(VoxelError::LengthMismatch {
                what: "probability map",
                expected: dims.len() * channels,
                got: probs.len(),
            });
        }
        let n = dims.len();
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..channels {
                let p = probs[c * n + i];
                if !(-PROB_SUM_TOL..=1.0 + PROB_SUM_TOL).contains(&p) {
                    return Err(VoxelError::NotNormalized(i));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(VoxelError::NotNormalized(i));
            }
        }
        Ok(Self { dims, spacing, channels, probs })
    }

    /// Builds a map from values the caller guarantees to be normalized.
    /// The simplex constraint is still asserted in debug builds.
    pub(crate) fn from_normalized(dims: Dims, spacing: Spacing, channels: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), dims.len() * channels);
        #[cfg(debug_assertions)]
        {
            let n = dims.len();
            for i in 0..n {
                let s: f64 = (0..channels).map(|c| probs[c * n + i]).sum();
                debug_assert!((s - 1.0).abs() <= PROB_SUM_TOL, "channel sum {s} at voxel {i}");
            }
        }
        Self { dims, spacing, channels, probs }
    }

    pub fn uniform(dims: Dims, spacing: Spacing, channels: usize) -> Self {
        let v = 1.0 / channels as f64;
        Self::from_normalized(dims, spacing, channels, vec![v; dims.len() * channels])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, channel: usize, voxel: usize) -> f64 {
        self.probs[channel * self.dims.len() + voxel]
    }

    /// Channel values at one voxel.
    pub fn voxel(&self, voxel: usize) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.channels).map(|c| self.probs[c * n + voxel]).collect()
    }

    /// Class of the largest channel at `voxel`, lowest index on ties.
    pub fn argmax_at(&self, voxel: usize) -> u8 {
        let n = self.dims.len();
        let mut best = 0;
        let mut best_p = self.probs[voxel];
        for c in 1..self.channels {
            let p = self.probs[c * n + voxel];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        best as u8
    }
}

/// Clamps intensities to `[lo, hi]` and maps them affinely onto `[0, 1]`.
pub fn window_and_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume, VoxelError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VoxelError::InvalidWindow { lo, hi });
    }
    let (lo64, width) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let data = v
        .data
        .iter()
        .map(|&x| ((f64::from(x.clamp(lo, hi)) - lo64) / width) as f32)
        .collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

pub fn one_hot_encode(l: &LabelMap) -> ProbMap {
    let n = l.dims.len();
    let c = l.num_classes();
    let mut probs = vec![0.0; n * c];
    for (i, &label) in l.labels.iter().enumerate() {
        probs[usize::from(label) * n + i] = 1.0;
    }
    ProbMap::from_normalized(l.dims, l.spacing, c, probs)
}

/// Hard decision per voxel; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbMap) -> LabelMap {
    let labels = (0..p.dims.len()).map(|i| p.argmax_at(i)).collect();
    LabelMap {
        dims: p.dims,
        spacing: p.spacing,
        num_classes: p.channels.min(255) as u8,
        labels,
    }
}
