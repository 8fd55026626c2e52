use super::{ParamSet, Scalar};

/// Optimizer hyperparameters and the step-decay schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate reductions.
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_factor: 0.9,
            decay_every: 5,
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        Self { config, m: ParamSet::zeros_like(params), v: ParamSet::zeros_like(params), step: 0 }
    }
}

/// `base_lr * decay_factor^floor(epoch / decay_every)`.
pub fn lr_at_epoch(config: &AdamConfig, epoch: usize) -> f64 {
    let k = epoch / config.decay_every.max(1);
    config.base_lr * config.decay_factor.powi(k as i32)
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step<F: Scalar>(params: &mut ParamSet<F>, grads: &ParamSet<F>, state: &mut AdamState<F>, lr: f64) {
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let bc1 = F::of(1.0 - c.beta1.powi(t));
    let bc2 = F::of(1.0 - c.beta2.powi(t));
    let (lr_f, eps, wd) = (F::of(lr), F::of(c.eps), F::of(c.weight_decay));
    for (((p, g), m), v) in params
        .entries
        .iter_mut()
        .zip(&grads.entries)
        .zip(state.m.entries.iter_mut())
        .zip(state.v.entries.iter_mut())
    {
        debug_assert_eq!(p.name, g.name);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + one_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            let decay = wd * p.data[i];
            p.data[i] -= lr_f * (mhat / (vhat.sqrt() + eps) + decay);
        }
    }
}
