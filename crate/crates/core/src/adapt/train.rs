//! Staged training loop.

use std::io::Write;

use log::{debug, warn};
use rand::seq::SliceRandom;

use super::augment::augment_k;
use super::data::{downsample_labels, downsample_volume, SubjectData};
use super::loss::{coarse_loss, cross_entropy, mean_squared, teacher_dice_loss};
use super::mix::{mix_batch, mix_batch_per_sample, MixItem};
use super::pseudo::{average_prediction, harden, sample_beta_weight, sharpen};
use super::{Stage, StudentInit, TeacherLabels, TrainConfig, TrainError};
use crate::nn::{adam_step, lr_at_epoch, AdamState, NetConfig, Network, NnError, ParamSet, Tensor};
use crate::rng::{derive_seed, stream};
use crate::sampler::{crop_labels, extract_context_patch, extract_patch, grid_centers, sample_centers, Domain, Patch, SamplerError};
use crate::volume::{one_hot_encode, Dims, LabelMap, Volume};

pub const LOSS_CSV_HEADER: &str = "epoch,step,stage,L_Ts,L_Tt,L_unsup,L_total,lr,h";

/// One optimizer step of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub stage: Stage,
    pub l_ts: f64,
    pub l_tt: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Mixing weight; only the adaptation stage mixes.
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub network: Network<f32>,
    pub log: Vec<LossRecord>,
}

pub fn write_loss_csv<W: Write>(mut w: W, log: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in log {
        let h = r.h.map_or_else(|| "NA".to_string(), |h| h.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.stage, r.l_ts, r.l_tt, r.l_unsup, r.l_total, r.lr, h
        )?;
    }
    Ok(())
}

/// Mean total loss of every epoch that has at least one step.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.l_total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.l_total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy)]
struct PoolItem {
    subject: usize,
    /// `None` for grid-centered context patches.
    organ: Option<u8>,
    center: [usize; 3],
}

fn build_pool(data: &[SubjectData], cfg: &TrainConfig, epoch: usize) -> Result<Vec<PoolItem>, TrainError> {
    let mut pool = Vec::new();
    for (si, s) in data.iter().enumerate() {
        let prior = s
            .prior
            .as_ref()
            .ok_or(TrainError::MissingData { stage: cfg.stage, what: "a coarse prior", subject: s.index })?;
        for &organ in &cfg.geometry.organs {
            let seed = derive_seed(cfg.seed, "pool", (epoch as u64) << 32 | s.index as u64);
            match sample_centers(prior, organ, cfg.geometry.centers_per_organ, seed) {
                Ok(centers) => pool.extend(centers.into_iter().map(|center| PoolItem { subject: si, organ: Some(organ), center })),
                Err(SamplerError::OrganEmpty(o)) => {
                    if epoch == 0 {
                        warn!("subject {}: organ {o} missing from the prior, not sampled", s.index);
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        if cfg.context_patches > 0 {
            let mut grid = grid_centers(prior.dims(), cfg.geometry.patch_dims);
            grid.shuffle(&mut stream(cfg.seed, "context", (epoch as u64) << 32 | s.index as u64));
            grid.truncate(cfg.context_patches);
            pool.extend(grid.into_iter().map(|center| PoolItem { subject: si, organ: None, center }));
        }
    }
    pool.shuffle(&mut stream(cfg.seed, "pool_order", epoch as u64));
    pool.truncate(cfg.steps_per_epoch);
    if pool.is_empty() && cfg.steps_per_epoch > 0 {
        return Err(TrainError::Data("no organ voxels in any prior".into()));
    }
    Ok(pool)
}

fn one_hot_tensor(l: &LabelMap) -> Tensor<f32> {
    Tensor::from_probmap(&one_hot_encode(l))
}

/// Zero-pads a tensor (and background-pads its labels) to extents that
/// are multiples of `m`.
fn pad_pair(input: Tensor<f32>, labels: &LabelMap, m: usize) -> (Tensor<f32>, Tensor<f32>) {
    let d = input.dims;
    let pd = Dims::from_array(d.as_array().map(|v| v.div_ceil(m) * m));
    let target = one_hot_tensor(labels);
    if pd == d {
        return (input, target);
    }
    let mut pi = Tensor::zeros(input.channels, pd);
    let mut pt = Tensor::zeros(target.channels, pd);
    let (n, pn) = (d.len(), pd.len());
    for i in 0..pn {
        pt.data[i] = 1.0;
    }
    for i in 0..n {
        let [x, y, z] = d.coords(i);
        let j = pd.index(x, y, z);
        for c in 0..input.channels {
            pi.data[c * pn + j] = input.data[c * n + i];
        }
        for c in 0..target.channels {
            pt.data[c * pn + j] = target.data[c * n + i];
        }
    }
    (pi, pt)
}

fn step_error(epoch: usize, step: usize) -> impl Fn(NnError) -> TrainError {
    move |e| match e {
        NnError::NonFinite { layer } => TrainError::NonFinite { epoch, step, detail: layer },
        other => TrainError::Nn(other),
    }
}

/// Trains one stage. `teacher` is required by the adaptation stage, where it
/// also provides the initial parameters unless `student_init` is scratch.
///
/// Only the coarse and supervised patch stages read `truth`; the adaptation
/// stage uses source and target volumes, the prior and the teacher.
pub fn train(cfg: &TrainConfig, data: &[SubjectData], num_classes: usize, teacher: Option<&Network<f32>>) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::NoSubjects);
    }
    let net_cfg = cfg.net_config(num_classes);
    let init_seed = derive_seed(cfg.seed, cfg.stage.name(), 0);
    let mut net = match (cfg.stage, teacher) {
        (Stage::StudentContrastMix, None) => return Err(TrainError::MissingTeacher(cfg.stage)),
        (Stage::StudentContrastMix, Some(t)) => {
            if t.config != net_cfg {
                return Err(TrainError::Config(format!(
                    "teacher network {:?} does not match the student {:?}",
                    t.config, net_cfg
                )));
            }
            match cfg.student_init {
                StudentInit::Teacher => t.clone(),
                StudentInit::Scratch => Network::init(net_cfg.clone(), init_seed)?,
            }
        }
        _ => Network::init(net_cfg.clone(), init_seed)?,
    };
    let mut adam = AdamState::new(cfg.adam.clone(), &net.params);
    let mut log = Vec::new();
    let mut global_step = 0u64;

    let coarse_inputs = if cfg.stage == Stage::Coarse { Some(coarse_examples(cfg, data, &net_cfg)?) } else { None };

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.adam, epoch);
        let pool = if coarse_inputs.is_none() { build_pool(data, cfg, epoch)? } else { Vec::new() };
        let order: Vec<usize> = match &coarse_inputs {
            Some(ex) => {
                let mut o: Vec<usize> = (0..ex.len()).collect();
                o.shuffle(&mut stream(cfg.seed, "coarse_order", epoch as u64));
                o
            }
            None => Vec::new(),
        };
        let steps = if coarse_inputs.is_some() { cfg.steps_per_epoch } else { pool.len() };
        for step in 0..steps {
            let err = step_error(epoch, step);
            let step_seed = derive_seed(cfg.seed, "step", global_step);
            let (grads, record) = match cfg.stage {
                Stage::Coarse => {
                    let ex = coarse_inputs.as_ref().expect("coarse examples prepared");
                    let (input, target) = &ex[order[step % order.len()]];
                    let (v, g) = net
                        .gradients(input, |p| {
                            let l = coarse_loss(p, target, cfg.eps_dice);
                            (l.value, l.grad)
                        })
                        .map_err(&err)?;
                    (g, supervised_record(cfg.stage, epoch, step, f64::from(v), lr))
                }
                Stage::Teacher | Stage::StudentSupervisedBaseline => {
                    let item = pool[step];
                    let (input, target) = supervised_patch(cfg, data, item)?;
                    let (v, g) = net
                        .gradients(&input, |p| {
                            let l = coarse_loss(p, &target, cfg.eps_dice);
                            (l.value, l.grad)
                        })
                        .map_err(&err)?;
                    (g, supervised_record(cfg.stage, epoch, step, f64::from(v), lr))
                }
                Stage::StudentContrastMix => {
                    let t = teacher.expect("checked above");
                    adaptation_step(cfg, &net, t, data, pool[step], step_seed, epoch, step, lr)?
                }
            };
            if !record.l_total.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, detail: format!("loss {}", record.l_total) });
            }
            adam_step(&mut net.params, &grads, &mut adam, lr);
            if let Some(layer) = net.params.first_non_finite() {
                return Err(TrainError::NonFinite { epoch, step, detail: format!("parameter {layer} after update") });
            }
            debug!("{} epoch {epoch} step {step}: loss {}", cfg.stage, record.l_total);
            log.push(record);
            global_step += 1;
        }
    }
    Ok(TrainOutput { network: net, log })
}

fn supervised_record(stage: Stage, epoch: usize, step: usize, loss: f64, lr: f64) -> LossRecord {
    LossRecord { epoch, step, stage, l_ts: 0.0, l_tt: 0.0, l_unsup: 0.0, l_total: loss, lr, h: None }
}

fn coarse_examples(
    cfg: &TrainConfig,
    data: &[SubjectData],
    net_cfg: &NetConfig,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>, TrainError> {
    data.iter()
        .map(|s| {
            let truth = s
                .truth
                .as_ref()
                .ok_or(TrainError::MissingData { stage: cfg.stage, what: "labels", subject: s.index })?;
            let small = downsample_volume(&s.source);
            let labels = downsample_labels(truth);
            let input = Tensor::from_f32(1, small.dims(), small.data())?;
            Ok(pad_pair(input, &labels, net_cfg.spatial_multiple()))
        })
        .collect()
}

fn patch_for(image: &Volume, prior: &LabelMap, item: PoolItem, pd: Dims) -> Result<Patch, SamplerError> {
    match item.organ {
        Some(organ) => extract_patch(image, prior, item.center, pd, organ),
        None => extract_context_patch(image, prior, item.center, pd),
    }
}

fn supervised_patch(cfg: &TrainConfig, data: &[SubjectData], item: PoolItem) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let s = &data[item.subject];
    let missing = |what| TrainError::MissingData { stage: cfg.stage, what, subject: s.index };
    let prior = s.prior.as_ref().ok_or_else(|| missing("a coarse prior"))?;
    let truth = s.truth.as_ref().ok_or_else(|| missing("labels"))?;
    let pd = cfg.geometry.patch_dims;
    let patch = patch_for(&s.source, prior, item, pd)?;
    let target = one_hot_tensor(&crop_labels(truth, item.center, pd));
    Ok((Tensor::from_patch(&patch), target))
}

#[allow(clippy::too_many_arguments)]
fn adaptation_step(
    cfg: &TrainConfig,
    net: &Network<f32>,
    teacher: &Network<f32>,
    data: &[SubjectData],
    item: PoolItem,
    step_seed: u64,
    epoch: usize,
    step: usize,
    lr: f64,
) -> Result<(ParamSet<f32>, LossRecord), TrainError> {
    let err = step_error(epoch, step);
    let s = &data[item.subject];
    let missing = |what| TrainError::MissingData { stage: cfg.stage, what, subject: s.index };
    let prior = s.prior.as_ref().ok_or_else(|| missing("a coarse prior"))?;
    let target = s.target.as_ref().ok_or_else(|| missing("a target volume"))?;
    let pd = cfg.geometry.patch_dims;
    let n = pd.len();

    let mut ms = patch_for(&s.source, prior, item, pd)?;
    ms.subject = s.index;
    let mut mt = patch_for(target, prior, item, pd)?;
    mt.domain = Domain::Target;
    mt.subject = s.index;
    let xs = Tensor::<f32>::from_patch(&ms);
    let xt = Tensor::<f32>::from_patch(&mt);

    // Teacher pseudo-label on the source patch.
    let mut m_s = teacher.forward(&xs).map_err(&err)?;
    if cfg.teacher_labels == TeacherLabels::Hard {
        m_s = Tensor::from_probmap(&harden(&m_s.to_probmap(s.source.spacing())));
    }

    // Averaged, sharpened self-prediction on augmented target copies.
    let spacing = s.source.spacing();
    let augmented = augment_k(&mt, cfg.k, step_seed);
    let mut first_trace = None;
    let mut preds = Vec::with_capacity(cfg.k);
    for (patch, aug) in &augmented {
        let trace = net.forward_trace(&Tensor::from_patch(patch)).map_err(&err)?;
        preds.push((trace.probs.to_probmap(spacing), *aug));
        if first_trace.is_none() {
            first_trace = Some(trace);
        }
    }
    let trace0 = first_trace.expect("k >= 1");
    let m_t = Tensor::<f32>::from_probmap(&sharpen(&average_prediction(&preds)?, cfg.temperature)?);

    // p_t is the first pass mapped back; voxels it never saw carry no loss.
    let inverse = augmented[0].1.inverse_map(pd);
    let c = m_t.channels;
    let mut p_t = m_t.clone();
    for (orig, aug) in inverse.iter().enumerate() {
        if let Some(j) = aug {
            for ch in 0..c {
                p_t.data[ch * n + orig] = trace0.probs.data[ch * n + j];
            }
        }
    }
    let l2 = mean_squared(&p_t, &m_t);
    let w_l2 = (cfg.lambda * cfg.lambda_t) as f32;
    let mut g_aug = Tensor::<f32>::zeros(c, pd);
    for (orig, aug) in inverse.iter().enumerate() {
        if let Some(j) = aug {
            for ch in 0..c {
                g_aug.data[ch * n + j] = w_l2 * l2.grad.data[ch * n + orig];
            }
        }
    }
    let mut grads = net.backward(&trace0, &g_aug).map_err(&err)?;

    // Cross-entropy of the student on the source patch against the teacher.
    let w_ce = cfg.lambda as f32;
    let (ce, g) = net
        .gradients(&xs, |p| {
            let mut l = cross_entropy(p, &m_s);
            l.grad.data.iter_mut().for_each(|v| *v *= w_ce);
            (l.value, l.grad)
        })
        .map_err(&err)?;
    grads.add_assign(&g);

    // Mixed source/target batch supervised by mixed teacher predictions.
    let mut rng = stream(step_seed, "beta", 0);
    let batch = [MixItem { input: xs, target: m_s.clone() }, MixItem { input: xt, target: m_s }];
    let (mixed, h) = if cfg.per_sample_h {
        let h0 = sample_beta_weight(cfg.beta_alpha, cfg.beta_beta, &mut rng)?;
        let hs = [h0, sample_beta_weight(cfg.beta_alpha, cfg.beta_beta, &mut rng)?];
        (mix_batch_per_sample(&batch, &hs, step_seed), hs[0])
    } else {
        let h = sample_beta_weight(cfg.beta_alpha, cfg.beta_beta, &mut rng)?;
        (mix_batch(&batch, h, step_seed), h)
    };
    let mut dice = [0.0f64; 2];
    for (slot, item) in dice.iter_mut().zip(&mixed) {
        let (v, g) = net
            .gradients(&item.input, |p| {
                let l = teacher_dice_loss(p, &item.target, cfg.eps_dice);
                (l.value, l.grad)
            })
            .map_err(&err)?;
        *slot = f64::from(v);
        grads.add_assign(&g);
    }
    let unsup = f64::from(ce) + cfg.lambda_t * f64::from(l2.value);
    let comps = super::LossComponents { teacher_source: dice[0], teacher_target: dice[1], unsup };
    let record = LossRecord {
        epoch,
        step,
        stage: cfg.stage,
        l_ts: dice[0],
        l_tt: dice[1],
        l_unsup: unsup,
        l_total: super::total_loss(&comps, cfg.lambda),
        lr,
        h: Some(h),
    };
    Ok((grads, record))
}
