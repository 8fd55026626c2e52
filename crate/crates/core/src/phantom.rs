//! Paired contrast-enhanced / non-contrast phantoms.
//!
//! Each subject is a set of jittered ellipsoidal organs over a uniform
//! background. The source volume renders every organ at its contrast-phase
//! intensity, the target volume at its non-contrast intensity, both with
//! independent Gaussian noise. The target can additionally be warped by a
//! smooth bounded displacement to model residual registration error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::mvol::{self, MvolError};
use crate::rng::{gaussian, stream};
use crate::volume::{Dims, LabelMap, Spacing, Volume, VoxelError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("organ {class_id} does not fit inside the volume for subject {subject}")]
    OrganOutOfBounds { class_id: u8, subject: usize },
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("subject index {index} out of range (num_subjects = {count})")]
    SubjectOutOfRange { index: usize, count: usize },
    #[error("impossible split: {0}")]
    ImpossibleSplit(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Mvol(#[from] MvolError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganSpec {
    pub class_id: u8,
    /// Voxel coordinates, fractional allowed.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub semi_axes: [f64; 3],
    pub source_hu: f32,
    pub target_hu: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    pub background_hu: f32,
    pub organs: Vec<OrganSpec>,
    pub noise_sigma: f64,
    pub center_jitter: f64,
    /// Per-axis bound of the target displacement, in voxels.
    pub misalignment: f64,
    pub num_subjects: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    /// 24 subjects of 48³ voxels with four organs whose source/target
    /// intensity order is scrambled between phases.
    fn default() -> Self {
        let organ = |class_id, center, semi_axes, source_hu, target_hu| OrganSpec {
            class_id,
            center,
            semi_axes,
            source_hu,
            target_hu,
        };
        Self {
            dims: Dims::new(48, 48, 48),
            spacing: Spacing::default(),
            background_hu: 0.0,
            organs: vec![
                organ(1, [17.0, 21.0, 24.0], [10.0, 9.0, 9.0], 150.0, 60.0),
                organ(2, [34.0, 17.0, 24.0], [6.0, 7.0, 8.0], 200.0, 120.0),
                organ(3, [31.0, 33.0, 20.0], [5.0, 5.0, 7.0], 100.0, 30.0),
                organ(4, [20.0, 34.0, 27.0], [3.5, 3.5, 11.0], 250.0, 170.0),
            ],
            noise_sigma: 10.0,
            center_jitter: 2.0,
            misalignment: 0.0,
            num_subjects: 24,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn num_classes(&self) -> usize {
        self.organs.iter().map(|o| usize::from(o.class_id)).max().unwrap_or(0) + 1
    }

    /// The same layout with extents, organ centers and semi-axes scaled by
    /// `factor`; handy for small test volumes.
    pub fn scaled(&self, factor: f64) -> Self {
        let dims = Dims::from_array(self.dims.as_array().map(|n| ((n as f64 * factor).round() as usize).max(1)));
        let organs = self
            .organs
            .iter()
            .map(|o| OrganSpec {
                center: o.center.map(|c| c * factor),
                semi_axes: o.semi_axes.map(|a| a * factor),
                ..o.clone()
            })
            .collect();
        Self { dims, organs, center_jitter: self.center_jitter * factor, ..self.clone() }
    }

    pub fn organ_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.organs.iter().map(|o| o.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidConfig(m));
        if self.num_subjects < 1 {
            return bad("num_subjects must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.misalignment >= 0.0) || !self.misalignment.is_finite() {
            return bad(format!("misalignment {} must be >= 0", self.misalignment));
        }
        if !(self.center_jitter >= 0.0) || !self.center_jitter.is_finite() {
            return bad(format!("center_jitter {} must be >= 0", self.center_jitter));
        }
        if self.dims.is_empty() {
            return bad(format!("zero-sized dims {:?}", self.dims));
        }
        Spacing::new(self.spacing.dx, self.spacing.dy, self.spacing.dz)?;
        if self.organs.is_empty() {
            return bad("at least one organ is required".into());
        }
        for o in &self.organs {
            if o.class_id == 0 || o.class_id == 255 {
                return bad(format!("organ class id {} must be in 1..=254", o.class_id));
            }
            if o.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return bad(format!("organ {} has non-positive semi-axes", o.class_id));
            }
        }
        Ok(())
    }

    /// Deterministic `key = value` description, used in dataset manifests.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let d = self.dims;
        let _ = writeln!(s, "dims = {},{},{}", d.nx, d.ny, d.nz);
        let sp = self.spacing;
        let _ = writeln!(s, "spacing = {},{},{}", sp.dx, sp.dy, sp.dz);
        let _ = writeln!(s, "background_hu = {}", self.background_hu);
        for o in &self.organs {
            let _ = writeln!(
                s,
                "organ {} = center {},{},{} semi_axes {},{},{} source_hu {} target_hu {}",
                o.class_id,
                o.center[0],
                o.center[1],
                o.center[2],
                o.semi_axes[0],
                o.semi_axes[1],
                o.semi_axes[2],
                o.source_hu,
                o.target_hu
            );
        }
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "center_jitter = {}", self.center_jitter);
        let _ = writeln!(s, "misalignment = {}", self.misalignment);
        let _ = writeln!(s, "num_subjects = {}", self.num_subjects);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// One generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub source: Volume,
    pub target: Volume,
    /// Labels in the source frame.
    pub truth: LabelMap,
    /// Labels in the target frame; equal to `truth` without misalignment.
    pub target_truth: LabelMap,
}

/// Sinusoidal displacement field (voxels) applied to the target, one
/// `[dx, dy, dz]` per voxel. Every component is bounded by the
/// misalignment amplitude.
pub fn displacement_field(cfg: &PhantomConfig, subject: usize) -> Vec<[f64; 3]> {
    let dims = cfg.dims;
    let m = cfg.misalignment;
    if m == 0.0 {
        return vec![[0.0; 3]; dims.len()];
    }
    let mut rng = stream(cfg.seed, "warp", subject as u64);
    let mut phase = [[0.0f64; 3]; 3];
    for row in phase.iter_mut() {
        for p in row.iter_mut() {
            *p = rng.random::<f64>() * std::f64::consts::TAU;
        }
    }
    let n = dims.as_array().map(|v| v as f64);
    (0..dims.len())
        .map(|i| {
            let c = dims.coords(i).map(|v| v as f64);
            let mut d = [0.0; 3];
            for (a, da) in d.iter_mut().enumerate() {
                let s: f64 = (0..3)
                    .map(|b| (std::f64::consts::TAU * c[b] / n[b] + phase[a][b]).sin())
                    .sum();
                *da = m * s / 3.0;
            }
            d
        })
        .collect()
}

fn trilinear(dims: Dims, data: &[f32], p: [f64; 3]) -> f32 {
    let max = dims.as_array().map(|n| (n - 1) as f64);
    let q = [p[0].clamp(0.0, max[0]), p[1].clamp(0.0, max[1]), p[2].clamp(0.0, max[2])];
    let base = q.map(|v| v.floor() as usize);
    let frac = [q[0] - base[0] as f64, q[1] - base[1] as f64, q[2] - base[2] as f64];
    let n = dims.as_array();
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            idx[a] = if hi { (base[a] + 1).min(n[a] - 1) } else { base[a] };
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 {
            acc += w * f64::from(data[dims.index(idx[0], idx[1], idx[2])]);
        }
    }
    acc as f32
}

fn rasterize(cfg: &PhantomConfig, subject: usize) -> Result<LabelMap, PhantomError> {
    let dims = cfg.dims;
    let mut rng = stream(cfg.seed, "jitter", subject as u64);
    let mut labels = vec![0u8; dims.len()];
    let n = dims.as_array();
    for organ in &cfg.organs {
        let mut c = organ.center;
        for v in c.iter_mut() {
            *v += cfg.center_jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
        let a = organ.semi_axes;
        for k in 0..3 {
            if c[k] - a[k] < 0.0 || c[k] + a[k] > (n[k] - 1) as f64 {
                return Err(PhantomError::OrganOutOfBounds { class_id: organ.class_id, subject });
            }
        }
        let lo = [0, 1, 2].map(|k| (c[k] - a[k]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|k| ((c[k] + a[k]).ceil() as usize).min(n[k] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let r = ((x as f64 - c[0]) / a[0]).powi(2)
                        + ((y as f64 - c[1]) / a[1]).powi(2)
                        + ((z as f64 - c[2]) / a[2]).powi(2);
                    if r <= 1.0 {
                        labels[dims.index(x, y, z)] = organ.class_id;
                    }
                }
            }
        }
    }
    Ok(LabelMap::new(dims, cfg.spacing, cfg.num_classes(), labels)?)
}

fn intensity_map(cfg: &PhantomConfig, truth: &LabelMap, source: bool) -> Vec<f32> {
    let mut lut = vec![cfg.background_hu; 256];
    for o in &cfg.organs {
        lut[usize::from(o.class_id)] = if source { o.source_hu } else { o.target_hu };
    }
    truth.labels().iter().map(|&l| lut[usize::from(l)]).collect()
}

fn add_noise(cfg: &PhantomConfig, data: &mut [f32], tag: &str, subject: usize) {
    if cfg.noise_sigma == 0.0 {
        return;
    }
    let mut rng = stream(cfg.seed, tag, subject as u64);
    for v in data.iter_mut() {
        *v = (f64::from(*v) + cfg.noise_sigma * gaussian(&mut rng)) as f32;
    }
}

/// Generates the `(source, target, truth)` triple of one subject.
pub fn generate_pair(cfg: &PhantomConfig, subject: usize) -> Result<PhantomSubject, PhantomError> {
    cfg.validate()?;
    if subject >= cfg.num_subjects {
        return Err(PhantomError::SubjectOutOfRange { index: subject, count: cfg.num_subjects });
    }
    let dims = cfg.dims;
    let truth = rasterize(cfg, subject)?;

    let mut source = intensity_map(cfg, &truth, true);
    add_noise(cfg, &mut source, "noise_src", subject);

    let clean_target = intensity_map(cfg, &truth, false);
    let (mut target, target_truth) = if cfg.misalignment > 0.0 {
        let field = displacement_field(cfg, subject);
        let max = dims.as_array().map(|n| (n - 1) as f64);
        let mut warped = Vec::with_capacity(dims.len());
        let mut labels = Vec::with_capacity(dims.len());
        for (i, d) in field.iter().enumerate() {
            let c = dims.coords(i);
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            warped.push(trilinear(dims, &clean_target, p));
            let r = [0, 1, 2].map(|a| p[a].round().clamp(0.0, max[a]) as usize);
            labels.push(truth.get(r[0], r[1], r[2]));
        }
        (warped, LabelMap::new(dims, cfg.spacing, cfg.num_classes(), labels)?)
    } else {
        (clean_target, truth.clone())
    };
    add_noise(cfg, &mut target, "noise_tgt", subject);

    Ok(PhantomSubject {
        source: Volume::new(dims, cfg.spacing, source)?,
        target: Volume::new(dims, cfg.spacing, target)?,
        truth,
        target_truth,
    })
}

#[cfg(test)]
/// Offsets of the 6-connectivity ball of `radius` (L1 distance ≤ radius).
fn l1_ball(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs() + dy.abs() + dz.abs() <= r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Produces a controllable-quality coarse prior from a label map.
///
/// Organs grow into background by `dilation_radius` steps of 6-connected
/// dilation; a background voxel reached by several organs at the same step
/// takes the lowest class id. Then `ceil(flip_fraction * |organ|)` voxels of
/// every organ are reset to background.
pub fn degrade_prior(truth: &LabelMap, dilation_radius: usize, flip_fraction: f64, seed: u64) -> LabelMap {
    let dims = truth.dims();
    let mut labels = truth.labels().to_vec();
    let neighbors: [[i64; 3]; 6] =
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    for _ in 0..dilation_radius {
        let prev = labels.clone();
        for (i, l) in labels.iter_mut().enumerate() {
            if prev[i] != 0 {
                continue;
            }
            let c = dims.coords(i).map(|v| v as i64);
            let best = neighbors
                .iter()
                .filter_map(|o| dims.checked_index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]))
                .map(|j| prev[j])
                .filter(|&v| v != 0)
                .min();
            if let Some(b) = best {
                *l = b;
            }
        }
    }
    if flip_fraction > 0.0 {
        let fraction = flip_fraction.min(1.0);
        let mut rng = stream(seed, "prior_flip", 0);
        for class in 1..truth.num_classes() as u8 {
            let mut idx: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
            if idx.is_empty() {
                continue;
            }
            let k = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
            let (chosen, _) = idx.partial_shuffle(&mut rng, k);
            for &i in chosen.iter() {
                labels[i] = 0;
            }
        }
    }
    LabelMap::new(dims, truth.spacing(), truth.num_classes(), labels)
        .expect("degraded prior keeps the class range")
}

/// Train / validation / test subject lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..num_subjects` by `ratios` = (train, val, test).
///
/// Validation and test sizes are the rounded ratios; train takes the
/// remainder. The assignment is a seeded permutation.
pub fn split_dataset(num_subjects: usize, ratios: [f64; 3], seed: u64) -> Result<Split, PhantomError> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(PhantomError::ImpossibleSplit(format!("negative ratio in {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PhantomError::ImpossibleSplit(format!("ratios sum to {sum}, not 1")));
    }
    let n = num_subjects as f64;
    let val = (ratios[1] * n).round() as usize;
    let test = (ratios[2] * n).round() as usize;
    if val + test > num_subjects {
        return Err(PhantomError::ImpossibleSplit(format!(
            "{val} validation + {test} test subjects exceed {num_subjects}"
        )));
    }
    let train = num_subjects - val - test;
    for (name, ratio, size) in [("train", ratios[0], train), ("val", ratios[1], val), ("test", ratios[2], test)] {
        if ratio > 0.0 && size == 0 {
            return Err(PhantomError::ImpossibleSplit(format!(
                "ratio {ratio} yields no {name} subjects out of {num_subjects}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..num_subjects).collect();
    order.shuffle(&mut stream(seed, "split", 0));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: sorted(&order[..train]),
        val: sorted(&order[train..train + val]),
        test: sorted(&order[train + val..]),
    })
}

pub fn source_file(idx: usize) -> String {
    format!("s{idx}_src.mvol")
}

pub fn target_file(idx: usize) -> String {
    format!("s{idx}_tgt.mvol")
}

pub fn truth_file(idx: usize) -> String {
    format!("s{idx}_truth.mvol")
}

/// Target-frame labels, only written when the target is warped.
pub fn target_truth_file(idx: usize) -> String {
    format!("s{idx}_tgt_truth.mvol")
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes every subject plus a manifest into `dir`. `extra_header` is
/// prepended verbatim to the manifest (callers echo their own config there).
pub fn write_dataset(cfg: &PhantomConfig, dir: &Path, extra_header: &str) -> Result<(), PhantomError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(extra_header);
    manifest.push_str("# phantom\n");
    manifest.push_str(&cfg.describe());
    manifest.push_str("# subjects\n");
    for idx in 0..cfg.num_subjects {
        let s = generate_pair(cfg, idx)?;
        mvol::write_volume(dir.join(source_file(idx)), &s.source)?;
        mvol::write_volume(dir.join(target_file(idx)), &s.target)?;
        mvol::write_labels(dir.join(truth_file(idx)), &s.truth)?;
        if cfg.misalignment > 0.0 {
            mvol::write_labels(dir.join(target_truth_file(idx)), &s.target_truth)?;
        }
        let _ = writeln!(manifest, "subject {idx} {} {} {}", source_file(idx), target_file(idx), truth_file(idx));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}
