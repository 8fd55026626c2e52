//! Training losses over probability tensors.
//!
//! Every loss returns its value together with the gradient with respect to
//! the predicted probabilities; targets are treated as constants.

use crate::nn::{Scalar, Tensor};

/// Offset inside logarithms.
pub const LOG_DELTA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<F> {
    pub value: F,
    pub grad: Tensor<F>,
}

fn check_pair<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) {
    assert_eq!(pred.channels, target.channels, "channel count mismatch");
    assert_eq!(pred.dims, target.dims, "spatial dims mismatch");
}

/// Soft Dice over all classes plus voxel-averaged cross-entropy, used to
/// fit the coarse model and the teacher against one-hot labels.
///
/// `L = 1 − (2/C) Σ_c (Σ y·h + ε/2) / (Σ y² + Σ h² + ε) − (1/I) Σ y·ln(h + δ)`.
/// Half of the smoothing constant goes into the numerator, so a perfect
/// prediction and an absent class both give a ratio of exactly ½.
pub fn coarse_loss<F: Scalar>(h: &Tensor<F>, y: &Tensor<F>, eps: f64) -> LossGrad<F> {
    check_pair(h, y);
    let n = h.dims.len();
    let c = h.channels;
    let mut grad = Tensor::zeros(c, h.dims);
    let two_over_c = F::of(2.0 / c as f64);
    let (eps_f, half_eps) = (F::of(eps), F::of(eps / 2.0));
    let mut ratio_sum = F::zero();
    for ch in 0..c {
        let (hs, ys) = (h.channel(ch), y.channel(ch));
        let mut inter = F::zero();
        let mut sq = F::zero();
        for i in 0..n {
            inter += ys[i] * hs[i];
            sq += ys[i] * ys[i] + hs[i] * hs[i];
        }
        let num = inter + half_eps;
        let den = sq + eps_f;
        ratio_sum += num / den;
        let g = &mut grad.data[ch * n..(ch + 1) * n];
        for i in 0..n {
            let dr = ys[i] / den - num * F::of(2.0) * hs[i] / (den * den);
            g[i] = -two_over_c * dr;
        }
    }
    let dice = F::one() - two_over_c * ratio_sum;
    let ce = cross_entropy_into(h, y, &mut grad, F::one());
    LossGrad { value: dice + ce, grad }
}

/// Adds `weight ·` the gradient of `−(1/I) Σ t·ln(p + δ)` into `grad` and
/// returns the unweighted value.
fn cross_entropy_into<F: Scalar>(p: &Tensor<F>, t: &Tensor<F>, grad: &mut Tensor<F>, weight: F) -> F {
    let n = p.dims.len();
    let inv_n = F::of(1.0 / n as f64);
    let delta = F::of(LOG_DELTA);
    let mut total = F::zero();
    for ((&pv, &tv), g) in p.data.iter().zip(&t.data).zip(grad.data.iter_mut()) {
        if tv != F::zero() {
            total += tv * (pv + delta).ln();
            *g -= weight * inv_n * tv / (pv + delta);
        }
    }
    -total * inv_n
}

/// Voxel-averaged cross-entropy of `p` against the soft target `t`.
pub fn cross_entropy<F: Scalar>(p: &Tensor<F>, t: &Tensor<F>) -> LossGrad<F> {
    check_pair(p, t);
    let mut grad = Tensor::zeros(p.channels, p.dims);
    let value = cross_entropy_into(p, t, &mut grad, F::one());
    LossGrad { value, grad }
}

/// Per-class soft Dice summed over classes:
/// `Σ_c [1 − (2 Σ p·M + ε) / (Σ p + Σ M + ε)]`.
pub fn teacher_dice_loss<F: Scalar>(p: &Tensor<F>, m: &Tensor<F>, eps: f64) -> LossGrad<F> {
    check_pair(p, m);
    let n = p.dims.len();
    let eps_f = F::of(eps);
    let two = F::of(2.0);
    let mut grad = Tensor::zeros(p.channels, p.dims);
    let mut value = F::zero();
    for ch in 0..p.channels {
        let (ps, ms) = (p.channel(ch), m.channel(ch));
        let (mut inter, mut sp, mut sm) = (F::zero(), F::zero(), F::zero());
        for i in 0..n {
            inter += ps[i] * ms[i];
            sp += ps[i];
            sm += ms[i];
        }
        let num = two * inter + eps_f;
        let den = sp + sm + eps_f;
        value += F::one() - num / den;
        let g = &mut grad.data[ch * n..(ch + 1) * n];
        for i in 0..n {
            g[i] = -(two * ms[i] / den - num / (den * den));
        }
    }
    LossGrad { value, grad }
}

/// `(1/(I·C)) Σ ‖p − t‖²`.
pub fn mean_squared<F: Scalar>(p: &Tensor<F>, t: &Tensor<F>) -> LossGrad<F> {
    check_pair(p, t);
    let inv = F::of(1.0 / p.data.len() as f64);
    let two = F::of(2.0);
    let mut value = F::zero();
    let grad_data = p
        .data
        .iter()
        .zip(&t.data)
        .map(|(&a, &b)| {
            let d = a - b;
            value += d * d;
            two * d * inv
        })
        .collect();
    LossGrad { value: value * inv, grad: Tensor { channels: p.channels, dims: p.dims, data: grad_data } }
}

/// Value and gradients of the unsupervised term:
/// `CE(p_s, M_s) + λ_t · MSE(p_t, M_t)`. Returns `(value, ∂/∂p_s, ∂/∂p_t)`.
pub fn unsup_loss<F: Scalar>(
    p_s: &Tensor<F>,
    m_s: &Tensor<F>,
    p_t: &Tensor<F>,
    m_t: &Tensor<F>,
    lambda_t: f64,
) -> (F, Tensor<F>, Tensor<F>) {
    let ce = cross_entropy(p_s, m_s);
    let mut l2 = mean_squared(p_t, m_t);
    let w = F::of(lambda_t);
    for g in &mut l2.grad.data {
        *g *= w;
    }
    (ce.value + w * l2.value, ce.grad, l2.grad)
}

/// Loss terms of one adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub teacher_source: f64,
    pub teacher_target: f64,
    pub unsup: f64,
}

/// `L_Ts + L_Tt + λ·L_unsup`.
pub fn total_loss(c: &LossComponents, lambda: f64) -> f64 {
    c.teacher_source + c.teacher_target + lambda * c.unsup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn t(channels: usize, n: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(channels, Dims::new(n, 1, 1), data).unwrap()
    }

    /// Random softmax-like tensor with `c` channels over `n` voxels.
    fn simplex(c: usize, n: usize, raw: &[f64]) -> Tensor<f64> {
        let mut data = vec![0.0; c * n];
        for i in 0..n {
            let s: f64 = (0..c).map(|k| raw[k * n + i]).sum();
            for k in 0..c {
                data[k * n + i] = raw[k * n + i] / s;
            }
        }
        t(c, n, data)
    }

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.data.len())
            .map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a.data[i] += h;
                b.data[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn coarse_perfect_prediction_is_zero() {
        let y = t(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let l = coarse_loss(&y, &y, 1e-5);
        assert!(l.value.abs() <= 1e-6, "{}", l.value);
    }

    #[test]
    fn coarse_uniform_two_voxels() {
        // Voxel 0 is class 0, voxel 1 is class 1; h = ½ everywhere.
        let y = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let h = t(2, 2, vec![0.5; 4]);
        let eps = 1e-5;
        // Each class: Σyh = 0.5, Σy² = 1, Σh² = 0.5.
        let ratio = (0.5 + eps / 2.0) / (1.5 + eps);
        let dice = 1.0 - (2.0 / 2.0) * (2.0 * ratio);
        let ce = -(0.5f64 + LOG_DELTA).ln();
        let l = coarse_loss(&h, &y, eps);
        assert!((l.value - (dice + ce)).abs() < 1e-12);
    }

    #[test]
    fn teacher_dice_examples() {
        let m = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let same = teacher_dice_loss(&m, &m, 1e-5);
        assert!(same.value.abs() <= 1e-6 * 2.0);
        let disjoint = t(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let l = teacher_dice_loss(&disjoint, &m, 1e-9);
        assert!((l.value - 2.0).abs() < 1e-8);

        let p = t(2, 2, vec![0.3, 0.8, 0.7, 0.2]);
        let q = t(2, 2, vec![0.6, 0.1, 0.4, 0.9]);
        let eps = 1e-5;
        let c0 = 1.0 - (2.0 * (0.3 * 0.6 + 0.8 * 0.1) + eps) / (0.3 + 0.8 + 0.6 + 0.1 + eps);
        let c1 = 1.0 - (2.0 * (0.7 * 0.4 + 0.2 * 0.9) + eps) / (0.7 + 0.2 + 0.4 + 0.9 + eps);
        assert!((teacher_dice_loss(&p, &q, eps).value - (c0 + c1)).abs() < 1e-12);
    }

    #[test]
    fn unsup_examples() {
        let m = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let (v, _, _) = unsup_loss(&m, &m, &m, &m, 1.0);
        assert!(v.abs() < 1e-11);

        let ps = t(2, 2, vec![0.3, 0.8, 0.7, 0.2]);
        let ms = t(2, 2, vec![0.6, 0.1, 0.4, 0.9]);
        let pt = t(2, 2, vec![0.5, 0.25, 0.5, 0.75]);
        let mt = t(2, 2, vec![0.9, 0.0, 0.1, 1.0]);
        let ce = -(0.6 * (0.3f64 + LOG_DELTA).ln()
            + 0.1 * (0.8f64 + LOG_DELTA).ln()
            + 0.4 * (0.7f64 + LOG_DELTA).ln()
            + 0.9 * (0.2f64 + LOG_DELTA).ln())
            / 2.0;
        let l2 = (0.4f64.powi(2) + 0.25f64.powi(2) + 0.4f64.powi(2) + 0.25f64.powi(2)) / 4.0;
        let (v, _, _) = unsup_loss(&ps, &ms, &pt, &mt, 0.7);
        assert!((v - (ce + 0.7 * l2)).abs() < 1e-12);
        let (v0, _, _) = unsup_loss(&ps, &ms, &pt, &mt, 0.0);
        assert!((v0 - ce).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let c = LossComponents { teacher_source: 1.0, teacher_target: 0.5, unsup: 0.2 };
        assert!((total_loss(&c, 1.0) - 1.7).abs() < 1e-15);
        assert_eq!(total_loss(&c, 0.0), 1.5);
        assert_eq!(total_loss(&LossComponents::default(), 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            raw in proptest::collection::vec(0.05f64..1.0, 18),
            rawt in proptest::collection::vec(0.05f64..1.0, 18),
        ) {
            let (c, n) = (3, 6);
            let p = simplex(c, n, &raw);
            let m = simplex(c, n, &rawt);
            let checks: Vec<(Box<dyn Fn(&Tensor<f64>) -> f64>, Tensor<f64>)> = vec![
                (Box::new(|x| coarse_loss(x, &m, 1e-5).value), coarse_loss(&p, &m, 1e-5).grad),
                (Box::new(|x| teacher_dice_loss(x, &m, 1e-5).value), teacher_dice_loss(&p, &m, 1e-5).grad),
                (Box::new(|x| mean_squared(x, &m).value), mean_squared(&p, &m).grad),
                (Box::new(|x| cross_entropy(x, &m).value), cross_entropy(&p, &m).grad),
            ];
            for (f, g) in checks {
                let num = numeric_grad(f, &p);
                for (a, b) in g.data.iter().zip(&num) {
                    prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }

        #[test]
        fn losses_are_non_negative(
            raw in proptest::collection::vec(0.0f64..1.0, 12),
            rawt in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let bump = |v: &Vec<f64>| v.iter().map(|x| x + 1e-3).collect::<Vec<_>>();
            let p = simplex(3, 4, &bump(&raw));
            let m = simplex(3, 4, &bump(&rawt));
            prop_assert!(coarse_loss(&p, &m, 1e-5).value >= -1e-9);
            prop_assert!(teacher_dice_loss(&p, &m, 1e-5).value >= -1e-9);
            prop_assert!(unsup_loss(&p, &m, &m, &p, 1.0).0 >= -1e-9);
        }
    }
}
