//! Overlap and surface-distance metrics and the Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::volume::{Dims, LabelMap, Spacing};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label maps differ in shape")]
    DimsMismatch,
    #[error("surface distance undefined for an empty mask")]
    EmptyMask,
    #[error("paired samples need equal, non-zero lengths (got {0} and {1})")]
    BadSample(usize, usize),
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks agree perfectly.
pub fn dice_score(p: &[bool], g: &[bool]) -> Result<f64, MetricsError> {
    if p.len() != g.len() {
        return Err(MetricsError::LengthMismatch(p.len(), g.len()));
    }
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        inter += usize::from(a && b);
        sp += usize::from(a);
        sg += usize::from(b);
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

const NEIGHBORS: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Foreground voxels with a background 6-neighbour; the outside of the
/// grid counts as background. Indices in ascending order.
pub fn surface_voxels(mask: &[bool], dims: Dims) -> Vec<usize> {
    assert_eq!(mask.len(), dims.len(), "mask does not match dims");
    (0..mask.len())
        .filter(|&i| {
            mask[i] && {
                let c = dims.coords(i).map(|v| v as i64);
                NEIGHBORS.iter().any(|o| match dims.checked_index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]) {
                    Some(j) => !mask[j],
                    None => true,
                })
            }
        })
        .collect()
}

/// Strategy for nearest-surface queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NearestSearch {
    /// Pairwise distances; exact, quadratic in the surface sizes.
    Brute,
    /// Separable squared Euclidean distance transform over the grid.
    DistanceTransform,
    /// Brute force for small surfaces, the transform otherwise.
    Auto,
}

/// Surface pairs below this product use brute force under `Auto`.
const BRUTE_LIMIT: usize = 1 << 16;

/// Symmetric mean surface distance in mm.
pub fn mean_surface_distance(p: &[bool], g: &[bool], dims: Dims, spacing: Spacing) -> Result<f64, MetricsError> {
    mean_surface_distance_with(p, g, dims, spacing, NearestSearch::Auto)
}

pub fn mean_surface_distance_with(
    p: &[bool],
    g: &[bool],
    dims: Dims,
    spacing: Spacing,
    search: NearestSearch,
) -> Result<f64, MetricsError> {
    if p.len() != g.len() {
        return Err(MetricsError::LengthMismatch(p.len(), g.len()));
    }
    if p.len() != dims.len() {
        return Err(MetricsError::LengthMismatch(p.len(), dims.len()));
    }
    let sp = surface_voxels(p, dims);
    let sg = surface_voxels(g, dims);
    if sp.is_empty() || sg.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let s = spacing.as_f64();
    let brute = match search {
        NearestSearch::Brute => true,
        NearestSearch::DistanceTransform => false,
        NearestSearch::Auto => sp.len() * sg.len() <= BRUTE_LIMIT,
    };
    let (a, b) = if brute {
        (mean_nearest_brute(&sp, &sg, dims, s), mean_nearest_brute(&sg, &sp, dims, s))
    } else {
        (mean_nearest_edt(&sp, &sg, dims, s), mean_nearest_edt(&sg, &sp, dims, s))
    };
    Ok(0.5 * (a + b))
}

fn mm(c: [usize; 3], s: [f64; 3]) -> [f64; 3] {
    [c[0] as f64 * s[0], c[1] as f64 * s[1], c[2] as f64 * s[2]]
}

fn mean_nearest_brute(from: &[usize], to: &[usize], dims: Dims, s: [f64; 3]) -> f64 {
    let targets: Vec<[f64; 3]> = to.iter().map(|&j| mm(dims.coords(j), s)).collect();
    let total: f64 = from
        .iter()
        .map(|&i| {
            let a = mm(dims.coords(i), s);
            targets
                .iter()
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

fn mean_nearest_edt(from: &[usize], to: &[usize], dims: Dims, s: [f64; 3]) -> f64 {
    let mut f = vec![f64::INFINITY; dims.len()];
    for &j in to {
        f[j] = 0.0;
    }
    let field = squared_distance_transform(f, dims, s);
    from.iter().map(|&i| field[i].sqrt()).sum::<f64>() / from.len() as f64
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel
/// where `f` is zero, one separable lower-envelope pass per axis.
pub fn squared_distance_transform(mut f: Vec<f64>, dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let d = dims.as_array();
    let stride = [1, d[0], d[0] * d[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..d[o2] {
            for a in 0..d[o1] {
                let base = a * stride[o1] + b * stride[o2];
                line.clear();
                line.extend((0..d[axis]).map(|k| f[base + k * stride[axis]]));
                lower_envelope(&line, spacing[axis], &mut out);
                for (k, v) in out.iter().enumerate() {
                    f[base + k * stride[axis]] = *v;
                }
            }
        }
    }
    f
}

/// `out[p] = min_q f[q] + (step·(p − q))²` over finite `f[q]`.
fn lower_envelope(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let pos = |q: usize| q as f64 * step;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let x = ((f[q] + pos(q).powi(2)) - (f[r] + pos(r).powi(2))) / (2.0 * (pos(q) - pos(r)));
                    if x <= *z.last().expect("boundary per parabola") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let r = v[k];
        *o = f[r] + (x - pos(r)).powi(2);
    }
}

/// Per-(subject, organ) evaluation; `msd` is `None` when undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganResult {
    pub subject: usize,
    pub organ: u8,
    pub dice: f64,
    pub msd: Option<f64>,
}

/// Dice and surface distance for every organ class of a prediction.
pub fn evaluate_labels(subject: usize, pred: &LabelMap, truth: &LabelMap, organs: &[u8]) -> Result<Vec<OrganResult>, MetricsError> {
    if pred.dims() != truth.dims() {
        return Err(MetricsError::DimsMismatch);
    }
    organs
        .iter()
        .map(|&organ| {
            let (p, g) = (pred.mask(organ), truth.mask(organ));
            let dice = dice_score(&p, &g)?;
            let msd = match mean_surface_distance(&p, &g, truth.dims(), truth.spacing()) {
                Ok(v) => Some(v),
                Err(MetricsError::EmptyMask) => None,
                Err(e) => return Err(e),
            };
            Ok(OrganResult { subject, organ, dice, msd })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Every difference was zero.
    Degenerate,
    /// Exact null distribution of the signed-rank sum.
    Exact,
    /// Normal approximation with tie and continuity correction.
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Largest sample handled by the exact distribution.
pub const EXACT_MAX_N: usize = 20;

/// Average ranks (1-based) of `values`; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of `a − b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::BadSample(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_value: 1.0, n, method: WilcoxonMethod::Degenerate });
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        // Average ranks are multiples of ½, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: u64 = counts[..=w2].iter().sum();
        let upper: u64 = counts[w2..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / all).min(1.0);
        return Ok(WilcoxonResult { statistic: w, p_value: p, n, method: WilcoxonMethod::Exact });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(WilcoxonResult { statistic: w, p_value: 1.0, n, method: WilcoxonMethod::Normal });
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(WilcoxonResult { statistic: w, p_value: p, n, method: WilcoxonMethod::Normal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(dims: Dims, lo: usize, hi: usize) -> Vec<bool> {
        (0..dims.len())
            .map(|i| dims.coords(i).iter().all(|&c| (lo..hi).contains(&c)))
            .collect()
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, true, true, false, false];
        let b = [false, false, true, true, true, true];
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_score(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice_score(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(dice_score(&[true], &[true, false]).is_err());
    }

    #[test]
    fn surface_examples() {
        let d = Dims::new(5, 5, 5);
        let mut single = vec![false; d.len()];
        single[d.index(2, 2, 2)] = true;
        assert_eq!(surface_voxels(&single, d), vec![d.index(2, 2, 2)]);
        let c3 = cube(d, 1, 4);
        let s3 = surface_voxels(&c3, d);
        assert_eq!(s3.len(), 26);
        assert!(!s3.contains(&d.index(2, 2, 2)));
        assert_eq!(surface_voxels(&cube(d, 1, 3), d).len(), 8);
        assert!(surface_voxels(&vec![false; d.len()], d).is_empty());
        // Touching the border still counts as surface.
        assert_eq!(surface_voxels(&vec![true; d.len()], d).len(), 125 - 27);
    }

    #[test]
    fn msd_examples() {
        let d = Dims::new(4, 1, 2);
        let one = |i: usize| {
            let mut m = vec![false; d.len()];
            m[i] = true;
            m
        };
        let iso = Spacing::new(1.0, 1.0, 1.0).unwrap();
        for search in [NearestSearch::Brute, NearestSearch::DistanceTransform] {
            let v = mean_surface_distance_with(&one(0), &one(3), d, iso, search).unwrap();
            assert!((v - 3.0).abs() < 1e-12);
            let aniso = Spacing::new(0.68, 0.68, 3.0).unwrap();
            let v = mean_surface_distance_with(&one(0), &one(d.index(0, 0, 1)), d, aniso, search).unwrap();
            assert!((v - 3.0).abs() < 1e-12);
            assert_eq!(mean_surface_distance_with(&one(1), &one(1), d, aniso, search).unwrap(), 0.0);
        }
        assert_eq!(
            mean_surface_distance(&one(0), &vec![false; d.len()], d, iso),
            Err(MetricsError::EmptyMask)
        );
    }

    #[test]
    fn envelope_handles_empty_and_single_lines() {
        let mut out = Vec::new();
        lower_envelope(&[f64::INFINITY; 4], 1.0, &mut out);
        assert!(out.iter().all(|v| v.is_infinite()));
        lower_envelope(&[f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY], 2.0, &mut out);
        assert_eq!(out, vec![4.0, 0.0, 4.0, 16.0]);
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.method, WilcoxonMethod::Degenerate);

        let a = [1.1, 2.2, 3.3, 4.4, 5.5, 6.6];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert_eq!(r.p_value, 0.03125);
        assert!(wilcoxon_signed_rank(&a, &b[..3]).is_err());
    }

    #[test]
    fn wilcoxon_normal_branch() {
        // 30 positive distinct differences: z far in the tail.
        let a: Vec<f64> = (1..=30).map(f64::from).collect();
        let r = wilcoxon_signed_rank(&a, &vec![0.0; 30]).unwrap();
        assert_eq!(r.method, WilcoxonMethod::Normal);
        assert_eq!(r.statistic, 465.0);
        assert!(r.p_value < 1e-5);
        // Symmetric differences sit at the centre.
        let a: Vec<f64> = (1..=30).map(|i| if i % 2 == 0 { f64::from(i) } else { -f64::from(i) }).collect();
        let r = wilcoxon_signed_rank(&a, &vec![0.0; 30]).unwrap();
        assert!(r.p_value > 0.5);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn random_mask(bits: &[bool], dims: Dims) -> Vec<bool> {
        bits[..dims.len()].to_vec()
    }

    fn brute_surface(mask: &[bool], dims: Dims) -> Vec<usize> {
        let mut out = Vec::new();
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    if !mask[i] {
                        continue;
                    }
                    let inside = |x: i64, y: i64, z: i64| {
                        x >= 0
                            && y >= 0
                            && z >= 0
                            && (x as usize) < dims.nx
                            && (y as usize) < dims.ny
                            && (z as usize) < dims.nz
                            && mask[dims.index(x as usize, y as usize, z as usize)]
                    };
                    let (x, y, z) = (x as i64, y as i64, z as i64);
                    let all = inside(x - 1, y, z)
                        && inside(x + 1, y, z)
                        && inside(x, y - 1, z)
                        && inside(x, y + 1, z)
                        && inside(x, y, z - 1)
                        && inside(x, y, z + 1);
                    if !all {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn surface_and_distance_match_brute_force(
            nx in 1usize..=8, ny in 1usize..=8, nz in 1usize..=8,
            bits_a in proptest::collection::vec(any::<bool>(), 512),
            bits_b in proptest::collection::vec(any::<bool>(), 512),
            sx in 0.3f32..3.0, sz in 0.3f32..3.0,
        ) {
            let d = Dims::new(nx, ny, nz);
            let a = random_mask(&bits_a, d);
            let b = random_mask(&bits_b, d);
            prop_assert_eq!(surface_voxels(&a, d), brute_surface(&a, d));
            let sp = Spacing::new(sx, sx, sz).unwrap();
            let brute = mean_surface_distance_with(&a, &b, d, sp, NearestSearch::Brute);
            let edt = mean_surface_distance_with(&a, &b, d, sp, NearestSearch::DistanceTransform);
            match (brute, edt) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y),
                (x, y) => prop_assert_eq!(x, y),
            }
            prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        }

        #[test]
        fn msd_scales_with_spacing(
            bits_a in proptest::collection::vec(any::<bool>(), 125),
            bits_b in proptest::collection::vec(any::<bool>(), 125),
            k in 0.5f32..4.0,
        ) {
            let d = Dims::new(5, 5, 5);
            let one = Spacing::new(1.0, 1.0, 1.0).unwrap();
            let scaled = Spacing::new(k, k, k).unwrap();
            if let (Ok(x), Ok(y)) = (
                mean_surface_distance(&bits_a, &bits_b, d, one),
                mean_surface_distance(&bits_a, &bits_b, d, scaled),
            ) {
                prop_assert!((y - f64::from(k) * x).abs() <= 1e-6 * (1.0 + y));
                let back = mean_surface_distance(&bits_b, &bits_a, d, one).unwrap();
                prop_assert!((x - back).abs() <= 1e-12);
            }
        }

        #[test]
        fn exact_branch_matches_enumeration(
            a in proptest::collection::vec(-3i32..=3, 1..=10),
            b in proptest::collection::vec(-3i32..=3, 10),
        ) {
            let a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
            let b: Vec<f64> = b[..a.len()].iter().map(|&v| f64::from(v) * 0.5).collect();
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            prop_assert_eq!(r.p_value, brute_wilcoxon(&a, &b));
        }
    }

    /// Two-sided p from all 2^n sign assignments of the ranked differences.
    fn brute_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let n = d.len();
        if n == 0 {
            return 1.0;
        }
        // Ranks by counting, independent of the sorting implementation.
        let ranks: Vec<f64> = d
            .iter()
            .map(|x| {
                let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
                let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect();
        let w: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let (mut lo, mut hi) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
    }
}
