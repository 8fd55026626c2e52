use rand::Rng;

use super::ops::{self, NormCache};
use super::{NnError, Scalar, Tensor};
use crate::rng::{gaussian, stream};
use crate::volume::Dims;

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    None,
}

/// Architecture of the encoder–decoder.
///
/// Level `l` has `widths[l]` feature channels. Every level is one 3×3×3
/// convolution block (conv, optional instance norm, ReLU); levels are joined
/// by 2×2×2 average pooling on the way down and 2×2×2 stride-2 transposed
/// convolutions plus skip concatenation on the way up. A 1×1×1 convolution
/// and softmax produce the class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub norm: NormKind,
}

impl NetConfig {
    /// Three levels of (8, 16, 32) channels with instance norm.
    pub fn desk_scale(in_channels: usize, num_classes: usize) -> Self {
        Self { in_channels, num_classes, widths: vec![8, 16, 32], norm: NormKind::Instance }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Required divisor of every input extent.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(NnError::Config(format!("invalid widths {:?}", self.widths)));
        }
        if self.in_channels == 0 {
            return Err(NnError::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let k = KERNEL;
        let l = self.levels();
        for lvl in 0..l {
            let cin = if lvl == 0 { self.in_channels } else { self.widths[lvl - 1] };
            let w = self.widths[lvl];
            v.push((format!("enc{lvl}.conv.weight"), vec![w, cin, k, k, k]));
            v.push((format!("enc{lvl}.conv.bias"), vec![w]));
            if self.norm == NormKind::Instance {
                v.push((format!("enc{lvl}.norm.scale"), vec![w]));
                v.push((format!("enc{lvl}.norm.shift"), vec![w]));
            }
        }
        for lvl in (0..l.saturating_sub(1)).rev() {
            let (w, wn) = (self.widths[lvl], self.widths[lvl + 1]);
            v.push((format!("dec{lvl}.up.weight"), vec![wn, w, 2, 2, 2]));
            v.push((format!("dec{lvl}.up.bias"), vec![w]));
            v.push((format!("dec{lvl}.conv.weight"), vec![w, 2 * w, k, k, k]));
            v.push((format!("dec{lvl}.conv.bias"), vec![w]));
            if self.norm == NormKind::Instance {
                v.push((format!("dec{lvl}.norm.scale"), vec![w]));
                v.push((format!("dec{lvl}.norm.shift"), vec![w]));
            }
        }
        v.push(("head.weight".into(), vec![self.num_classes, self.widths[0], 1, 1, 1]));
        v.push(("head.bias".into(), vec![self.num_classes]));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Named parameter (or gradient, or moment) tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    pub entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn zeros_like<G>(other: &ParamSet<G>) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![F::zero(); e.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    fn slot(&self, name: &str) -> &[F] {
        &self.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data
    }

    fn slot_mut(&mut self, name: &str) -> &mut Vec<F> {
        &mut self.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).data
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|&v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// `self += other`, entry by entry.
    pub fn add_assign(&mut self, other: &ParamSet<F>) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.data.iter().any(|v| !v.is_finite()))
            .map(|e| e.name.as_str())
    }
}

/// Saved state of one convolution block.
#[derive(Debug, Clone)]
struct BlockTrace<F> {
    input: Tensor<F>,
    norm: Option<NormCache<F>>,
    output: Tensor<F>,
}

/// Intermediate activations of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    enc: Vec<BlockTrace<F>>,
    /// Inputs of the transposed convolutions, indexed by decoder level.
    up_inputs: Vec<Tensor<F>>,
    dec: Vec<Option<BlockTrace<F>>>,
    head_input: Tensor<F>,
    pub probs: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub config: NetConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Network<F> {
    /// He-style initialization: kernels ~ N(0, 2 / fan_in), zero biases,
    /// unit norm scale, zero norm shift.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in = if name.contains(".up.") {
                        shape[0]
                    } else {
                        shape[1..].iter().product::<usize>()
                    };
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    (0..len).map(|_| F::of(std * gaussian(&mut rng))).collect()
                } else if name.ends_with(".scale") {
                    vec![F::one(); len]
                } else {
                    vec![F::zero(); len]
                };
                ParamEntry { name, shape, data }
            })
            .collect();
        Ok(Self { config, params: ParamSet { entries } })
    }

    /// All-zero parameters (including norm scales).
    pub fn zeros(config: NetConfig) -> Result<Self, NnError> {
        config.validate()?;
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                ParamEntry { name, shape, data: vec![F::zero(); len] }
            })
            .collect();
        Ok(Self { config, params: ParamSet { entries } })
    }

    /// Wraps loaded parameters after checking them against `config`.
    pub fn from_params(config: NetConfig, params: ParamSet<F>) -> Result<Self, NnError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.entries.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.entries.len()
            )));
        }
        for ((name, shape), e) in shapes.iter().zip(&params.entries) {
            if name != &e.name || shape != &e.shape {
                return Err(NnError::Shape(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    e.name, e.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn check_input(&self, input: &Tensor<F>) -> Result<(), NnError> {
        if input.channels != self.config.in_channels {
            return Err(NnError::Config(format!(
                "input has {} channels, network expects {}",
                input.channels, self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if input.dims.as_array().iter().any(|&d| d == 0 || d % m != 0) {
            return Err(NnError::Config(format!(
                "input extents {:?} must be positive multiples of {m}",
                input.dims
            )));
        }
        Ok(())
    }

    fn block(&self, prefix: &str, input: Tensor<F>) -> BlockTrace<F> {
        let w = self.params.slot(&format!("{prefix}.conv.weight"));
        let b = self.params.slot(&format!("{prefix}.conv.bias"));
        let cout = b.len();
        let mut pre = ops::conv3d(&input, w, b, cout, KERNEL);
        let norm = if self.config.norm == NormKind::Instance {
            let scale = self.params.slot(&format!("{prefix}.norm.scale"));
            let shift = self.params.slot(&format!("{prefix}.norm.shift"));
            let (y, cache) = ops::instance_norm(&pre, scale, shift);
            pre = y;
            Some(cache)
        } else {
            None
        };
        ops::relu_inplace(&mut pre);
        BlockTrace { input, norm, output: pre }
    }

    /// Backpropagates through one block, writing parameter gradients into
    /// `grads`; returns the input gradient when requested.
    fn block_backward(
        &self,
        prefix: &str,
        trace: &BlockTrace<F>,
        mut grad: Tensor<F>,
        grads: &mut ParamSet<F>,
        need_input: bool,
    ) -> Option<Tensor<F>> {
        ops::relu_backward_inplace(&trace.output, &mut grad);
        if let Some(cache) = &trace.norm {
            let scale = self.params.slot(&format!("{prefix}.norm.scale"));
            let (gi, gs, gb) = ops::instance_norm_backward(cache, scale, &grad);
            add_into(grads.slot_mut(&format!("{prefix}.norm.scale")), &gs);
            add_into(grads.slot_mut(&format!("{prefix}.norm.shift")), &gb);
            grad = gi;
        }
        let w = self.params.slot(&format!("{prefix}.conv.weight"));
        let (gi, gw, gb) = ops::conv3d_backward(&trace.input, w, &grad, KERNEL, need_input);
        add_into(grads.slot_mut(&format!("{prefix}.conv.weight")), &gw);
        add_into(grads.slot_mut(&format!("{prefix}.conv.bias")), &gb);
        gi
    }

    /// Forward pass keeping every activation needed by [`Network::backward`].
    pub fn forward_trace(&self, input: &Tensor<F>) -> Result<Trace<F>, NnError> {
        self.check_input(input)?;
        let levels = self.config.levels();
        let mut enc: Vec<BlockTrace<F>> = Vec::with_capacity(levels);
        for lvl in 0..levels {
            let x = if lvl == 0 { input.clone() } else { ops::avg_pool2(&enc[lvl - 1].output) };
            enc.push(self.block(&format!("enc{lvl}"), x));
        }
        let mut up_inputs: Vec<Tensor<F>> = vec![Tensor::zeros(0, input.dims); levels.saturating_sub(1)];
        let mut dec: Vec<Option<BlockTrace<F>>> = vec![None; levels.saturating_sub(1)];
        let mut current = enc[levels - 1].output.clone();
        for lvl in (0..levels.saturating_sub(1)).rev() {
            let w = self.params.slot(&format!("dec{lvl}.up.weight"));
            let b = self.params.slot(&format!("dec{lvl}.up.bias"));
            let up = ops::conv_transpose2(&current, w, b, self.config.widths[lvl]);
            up_inputs[lvl] = current;
            let cat = ops::concat_channels(&enc[lvl].output, &up);
            let t = self.block(&format!("dec{lvl}"), cat);
            current = t.output.clone();
            dec[lvl] = Some(t);
        }
        let logits = ops::conv3d(
            &current,
            self.params.slot("head.weight"),
            self.params.slot("head.bias"),
            self.config.num_classes,
            1,
        );
        let probs = ops::softmax(&logits);
        if !probs.is_finite() {
            return Err(NnError::NonFinite { layer: "forward output".into() });
        }
        Ok(Trace { enc, up_inputs, dec, head_input: current, probs })
    }

    /// Class probabilities at input resolution.
    pub fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        Ok(self.forward_trace(input)?.probs)
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the output probabilities.
    pub fn backward(&self, trace: &Trace<F>, grad_probs: &Tensor<F>) -> Result<ParamSet<F>, NnError> {
        if grad_probs.channels != trace.probs.channels || grad_probs.dims != trace.probs.dims {
            return Err(NnError::Shape("loss gradient does not match network output".into()));
        }
        let levels = self.config.levels();
        let mut grads = ParamSet::zeros_like(&self.params);

        let g_logits = ops::softmax_backward(&trace.probs, grad_probs);
        let (g_cur, gw, gb) =
            ops::conv3d_backward(&trace.head_input, self.params.slot("head.weight"), &g_logits, 1, true);
        add_into(grads.slot_mut("head.weight"), &gw);
        add_into(grads.slot_mut("head.bias"), &gb);
        let mut g_cur = g_cur.expect("input gradient requested");

        let mut g_enc: Vec<Option<Tensor<F>>> = vec![None; levels];
        for lvl in 0..levels.saturating_sub(1) {
            let t = trace.dec[lvl].as_ref().expect("decoder trace");
            let g_cat = self
                .block_backward(&format!("dec{lvl}"), t, g_cur, &mut grads, true)
                .expect("input gradient requested");
            let w = self.config.widths[lvl];
            let (g_skip, g_up) = ops::split_channels(&g_cat, w);
            accumulate(&mut g_enc[lvl], g_skip);
            let (g_prev, gw, gb) =
                ops::conv_transpose2_backward(&trace.up_inputs[lvl], self.params.slot(&format!("dec{lvl}.up.weight")), &g_up);
            add_into(grads.slot_mut(&format!("dec{lvl}.up.weight")), &gw);
            add_into(grads.slot_mut(&format!("dec{lvl}.up.bias")), &gb);
            g_cur = g_prev;
        }
        accumulate(&mut g_enc[levels - 1], g_cur);

        for lvl in (0..levels).rev() {
            let g = g_enc[lvl].take().expect("every encoder level receives a gradient");
            let need_input = lvl > 0;
            let gi = self.block_backward(&format!("enc{lvl}"), &trace.enc[lvl], g, &mut grads, need_input);
            if let Some(gi) = gi {
                let pooled = ops::avg_pool2_backward(&gi, trace.enc[lvl - 1].output.dims);
                accumulate(&mut g_enc[lvl - 1], pooled);
            }
        }
        if let Some(layer) = grads.first_non_finite() {
            return Err(NnError::NonFinite { layer: format!("gradient of {layer}") });
        }
        Ok(grads)
    }

    /// Runs forward, evaluates `loss` on the output and backpropagates.
    /// `loss` returns the scalar value and its gradient in the probabilities.
    pub fn gradients<L>(&self, input: &Tensor<F>, loss: L) -> Result<(F, ParamSet<F>), NnError>
    where
        L: FnOnce(&Tensor<F>) -> (F, Tensor<F>),
    {
        let trace = self.forward_trace(input)?;
        let (value, g) = loss(&trace.probs);
        if !value.is_finite() {
            return Err(NnError::NonFinite { layer: "loss".into() });
        }
        Ok((value, self.backward(&trace, &g)?))
    }

    /// Forward pass on an input whose extents need not be multiples of the
    /// network's down-sampling factor: it is zero-padded up to the next
    /// multiple and the output cropped back.
    pub fn forward_padded(&self, input: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let m = self.config.spatial_multiple();
        let d = input.dims;
        let pd = Dims::from_array(d.as_array().map(|v| v.div_ceil(m) * m));
        if pd == d {
            return self.forward(input);
        }
        let mut padded = Tensor::zeros(input.channels, pd);
        copy_box(input, &mut padded, d);
        let out = self.forward(&padded)?;
        let mut cropped = Tensor::zeros(out.channels, d);
        let (n, pn) = (d.len(), pd.len());
        for c in 0..out.channels {
            for i in 0..n {
                let [x, y, z] = d.coords(i);
                cropped.data[c * n + i] = out.data[c * pn + pd.index(x, y, z)];
            }
        }
        Ok(cropped)
    }
}

fn copy_box<F: Scalar>(src: &Tensor<F>, dst: &mut Tensor<F>, d: Dims) {
    let (n, pn) = (d.len(), dst.dims.len());
    for c in 0..src.channels {
        for i in 0..n {
            let [x, y, z] = d.coords(i);
            dst.data[c * pn + dst.dims.index(x, y, z)] = src.data[c * n + i];
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(t) => add_into(&mut t.data, &g.data),
        None => *slot = Some(g),
    }
}

/// Random input tensor in `[0, 1)`, used by tests and gradient checks.
pub(crate) fn random_input<F: Scalar>(channels: usize, dims: Dims, seed: u64) -> Tensor<F> {
    let mut rng = stream(seed, "input", 0);
    let data = (0..channels * dims.len()).map(|_| F::of(rng.random::<f64>())).collect();
    Tensor { channels, dims, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(norm: NormKind) -> NetConfig {
        NetConfig { in_channels: 2, num_classes: 3, widths: vec![3, 4], norm }
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let net = Network::<f32>::zeros(NetConfig::desk_scale(2, 3)).unwrap();
        let x = random_input::<f32>(2, Dims::new(8, 8, 4), 1);
        let p = net.forward(&x).unwrap();
        assert!(p.data.iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn output_shape_and_normalization() {
        let net = Network::<f32>::init(NetConfig::desk_scale(2, 3), 4).unwrap();
        let x = random_input::<f32>(2, Dims::new(16, 16, 8), 2);
        let p = net.forward(&x).unwrap();
        assert_eq!((p.channels, p.dims), (3, Dims::new(16, 16, 8)));
        let n = p.dims.len();
        for i in 0..n {
            let s: f32 = (0..3).map(|c| p.data[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors() {
        let net = Network::<f32>::init(NetConfig::desk_scale(2, 3), 0).unwrap();
        assert!(matches!(net.forward(&random_input(1, Dims::new(8, 8, 8), 0)), Err(NnError::Config(_))));
        assert!(matches!(net.forward(&random_input(2, Dims::new(8, 6, 8), 0)), Err(NnError::Config(_))));
        assert!(net.forward_padded(&random_input(2, Dims::new(8, 6, 7), 0)).is_ok());
    }

    #[test]
    fn output_gradient_of_squared_loss() {
        // 1/2 |p - t|^2 / n has gradient (p - t) / n at the output node
        let net = Network::<f64>::init(tiny(NormKind::Instance), 3).unwrap();
        let x = random_input::<f64>(2, Dims::new(4, 4, 2), 5);
        let p = net.forward(&x).unwrap();
        let t = random_input::<f64>(3, p.dims, 9);
        let n = p.data.len() as f64;
        let g: Vec<f64> = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) / n).collect();
        let h = 1e-6;
        for k in [0usize, 7, 40, 95] {
            let loss = |pp: &[f64]| pp.iter().zip(&t.data).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / n;
            let mut up = p.data.clone();
            up[k] += h;
            let mut dn = p.data.clone();
            dn[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_branch_has_zero_gradient() {
        // zero head weights: nothing upstream of the head influences the output
        let mut net = Network::<f64>::init(tiny(NormKind::Instance), 3).unwrap();
        net.params.get_mut("head.weight").unwrap().data.fill(0.0);
        let x = random_input::<f64>(2, Dims::new(4, 4, 2), 5);
        let (_, grads) = net
            .gradients(&x, |p| {
                let g = Tensor { channels: p.channels, dims: p.dims, data: vec![1.0; p.data.len()] };
                (p.data[0], Tensor { data: g.data.iter().enumerate().map(|(i, _)| (i % 3) as f64).collect(), ..g })
            })
            .unwrap();
        for e in &grads.entries {
            if !e.name.starts_with("head") {
                assert!(e.data.iter().all(|&v| v == 0.0), "{} has nonzero gradient", e.name);
            }
        }
        assert!(grads.get("head.weight").unwrap().data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn translation_consistency_without_norm() {
        // an input constant near the borders, shifted by the pooling stride,
        // shifts the interior of the output by the same amount
        let cfg = tiny(NormKind::None);
        let net = Network::<f64>::init(cfg, 8).unwrap();
        let d = Dims::new(16, 16, 16);
        let mut base = Tensor::<f64>::zeros(2, d);
        let mut rng = stream(2, "blob", 0);
        for c in 0..2 {
            for z in 5..9 {
                for y in 5..9 {
                    for x in 5..9 {
                        base.data[c * d.len() + d.index(x, y, z)] = rng.random::<f64>();
                    }
                }
            }
        }
        let s = 2;
        let mut shifted = Tensor::<f64>::zeros(2, d);
        for c in 0..2 {
            for i in 0..d.len() {
                let [x, y, z] = d.coords(i);
                if x + s < 16 && y + s < 16 && z + s < 16 {
                    shifted.data[c * d.len() + d.index(x + s, y + s, z + s)] = base.data[c * d.len() + i];
                }
            }
        }
        let a = net.forward(&base).unwrap();
        let b = net.forward(&shifted).unwrap();
        let mut max_diff: f64 = 0.0;
        for c in 0..3 {
            // border effects of zero padding reach three voxels deep
            for z in 3..11 {
                for y in 3..11 {
                    for x in 3..11 {
                        let va = a.data[c * d.len() + d.index(x, y, z)];
                        let vb = b.data[c * d.len() + d.index(x + s, y + s, z + s)];
                        max_diff = max_diff.max((va - vb).abs());
                    }
                }
            }
        }
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn deterministic_forward() {
        let net = Network::<f32>::init(NetConfig::desk_scale(2, 4), 1).unwrap();
        let x = random_input::<f32>(2, Dims::new(8, 8, 8), 0);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(net, Network::<f32>::init(NetConfig::desk_scale(2, 4), 1).unwrap());
    }
}
