//! Central finite-difference verification of the analytic gradients.

use rand::Rng;

use super::net::random_input;
use super::{NetConfig, Network, NnError, ParamSet, Tensor};
use crate::adapt::loss::{coarse_loss, cross_entropy, mean_squared, teacher_dice_loss};
use crate::rng::stream;
use crate::volume::Dims;

/// Finite-difference step.
const STEP: f64 = 1e-5;
/// Coordinates above this relative error are reported as failures.
const FAIL_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckLoss {
    /// Soft Dice plus cross-entropy against a one-hot target.
    Coarse,
    /// Summed per-class soft Dice against a soft target.
    TeacherDice,
    /// The unsupervised term: cross-entropy against a soft target plus
    /// squared error against another.
    Unsup,
    /// The full adaptation objective: two Dice terms on mixed inputs plus
    /// cross-entropy and squared error on un-mixed ones.
    Composite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: GradCheckLoss,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Layers with at least one coordinate above the failure threshold.
    pub offending_layers: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offending_layers.is_empty()
    }
}

struct Term {
    input: Tensor<f64>,
    target: Tensor<f64>,
    kind: TermKind,
}

#[derive(Clone, Copy)]
enum TermKind {
    Coarse,
    Dice,
    CrossEntropy,
    Squared,
}

const EPS_DICE: f64 = 1e-5;

fn eval_term(kind: TermKind, p: &Tensor<f64>, t: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let lg = match kind {
        TermKind::Coarse => coarse_loss(p, t, EPS_DICE),
        TermKind::Dice => teacher_dice_loss(p, t, EPS_DICE),
        TermKind::CrossEntropy => cross_entropy(p, t),
        TermKind::Squared => mean_squared(p, t),
    };
    (lg.value, lg.grad)
}

fn objective(net: &Network<f64>, terms: &[Term]) -> Result<(f64, ParamSet<f64>), NnError> {
    let mut total = 0.0;
    let mut grads = ParamSet::zeros_like(&net.params);
    for term in terms {
        let (v, g) = net.gradients(&term.input, |p| eval_term(term.kind, p, &term.target))?;
        total += v;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

fn value(net: &Network<f64>, terms: &[Term]) -> Result<f64, NnError> {
    let mut total = 0.0;
    for term in terms {
        let p = net.forward(&term.input)?;
        total += eval_term(term.kind, &p, &term.target).0;
    }
    Ok(total)
}

fn random_simplex(channels: usize, dims: Dims, seed: u64, tag: &str) -> Tensor<f64> {
    let n = dims.len();
    let mut rng = stream(seed, tag, 0);
    let mut t = Tensor::zeros(channels, dims);
    for i in 0..n {
        let raw: Vec<f64> = (0..channels).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        for (c, r) in raw.iter().enumerate() {
            t.data[c * n + i] = r / s;
        }
    }
    t
}

fn random_one_hot(channels: usize, dims: Dims, seed: u64) -> Tensor<f64> {
    let n = dims.len();
    let mut rng = stream(seed, "onehot", 0);
    let mut t = Tensor::zeros(channels, dims);
    for i in 0..n {
        t.data[rng.random_range(0..channels) * n + i] = 1.0;
    }
    t
}

fn build_terms(cfg: &NetConfig, loss: GradCheckLoss, dims: Dims, seed: u64) -> Vec<Term> {
    let (cin, c) = (cfg.in_channels, cfg.num_classes);
    let input = |k: u64| random_input::<f64>(cin, dims, seed.wrapping_add(k));
    match loss {
        GradCheckLoss::Coarse => {
            vec![Term { input: input(1), target: random_one_hot(c, dims, seed), kind: TermKind::Coarse }]
        }
        GradCheckLoss::TeacherDice => vec![Term {
            input: input(1),
            target: random_simplex(c, dims, seed, "target_a"),
            kind: TermKind::Dice,
        }],
        GradCheckLoss::Unsup => vec![
            Term {
                input: input(3),
                target: random_simplex(c, dims, seed, "target_c"),
                kind: TermKind::CrossEntropy,
            },
            Term { input: input(4), target: random_simplex(c, dims, seed, "target_d"), kind: TermKind::Squared },
        ],
        GradCheckLoss::Composite => vec![
            Term { input: input(1), target: random_simplex(c, dims, seed, "target_a"), kind: TermKind::Dice },
            Term { input: input(2), target: random_simplex(c, dims, seed, "target_b"), kind: TermKind::Dice },
            Term {
                input: input(3),
                target: random_simplex(c, dims, seed, "target_c"),
                kind: TermKind::CrossEntropy,
            },
            Term { input: input(4), target: random_simplex(c, dims, seed, "target_d"), kind: TermKind::Squared },
        ],
    }
}

/// Compares analytic and central-difference gradients (64-bit) for
/// `coordinates` parameter entries sampled round-robin across all layers.
///
/// The relative error of one coordinate is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    cfg: &NetConfig,
    loss: GradCheckLoss,
    seed: u64,
    coordinates: usize,
) -> Result<GradCheckReport, NnError> {
    let m = cfg.spatial_multiple();
    let dims = Dims::new(4 * m, 4 * m, 2 * m);
    let mut net = Network::<f64>::init(cfg.clone(), seed)?;
    // Perturb biases, norm shifts and scales away from their initial values
    // so every parameter has a generic gradient.
    let mut rng = stream(seed, "gradcheck_perturb", 0);
    for e in &mut net.params.entries {
        if !e.name.ends_with(".weight") {
            for v in &mut e.data {
                *v += 0.2 * (rng.random::<f64>() - 0.5);
            }
        }
    }
    let terms = build_terms(cfg, loss, dims, seed);
    let (_, analytic) = objective(&net, &terms)?;

    let mut rng = stream(seed, "gradcheck", 0);
    let layers = net.params.entries.len();
    let mut max_rel: f64 = 0.0;
    let mut offending: Vec<String> = Vec::new();
    for k in 0..coordinates {
        let e = k % layers;
        let i = rng.random_range(0..net.params.entries[e].data.len());
        let orig = net.params.entries[e].data[i];
        net.params.entries[e].data[i] = orig + STEP;
        let plus = value(&net, &terms)?;
        net.params.entries[e].data[i] = orig - STEP;
        let minus = value(&net, &terms)?;
        net.params.entries[e].data[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic.entries[e].data[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        let name = &net.params.entries[e].name;
        if rel > FAIL_THRESHOLD && !offending.contains(name) {
            offending.push(name.clone());
        }
    }
    Ok(GradCheckReport { loss, coordinates, max_rel_error: max_rel, offending_layers: offending })
}
