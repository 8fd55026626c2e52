//! The subcommands, callable without going through argument parsing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contrastmix::adapt::{self, coarse_prior, load_subjects, normalize_hu, PriorSource, Stage, TrainOutput};
use contrastmix::inference::{segment_volume, NetPredictor};
use contrastmix::metrics::{evaluate_labels, wilcoxon_signed_rank, OrganResult};
use contrastmix::mvol;
use contrastmix::nn::{read_checkpoint, write_checkpoint, Network};
use contrastmix::phantom::{
    degrade_prior, source_file, split_dataset, target_file, target_truth_file, truth_file, write_dataset, Split,
    MANIFEST_FILE,
};
use contrastmix::rng::derive_seed;
use contrastmix::LabelMap;
use log::info;

use crate::config::{PriorMode, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.mckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_B_FILE: &str = "results_b.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn pred_file(idx: usize) -> String {
    format!("s{idx}_pred.mvol")
}

pub fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.out_dir.join(stage.name())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(CONFIG_ECHO), cfg.render()).with_context(|| format!("writing config into {}", dir.display()))
}

/// Generates the phantom dataset into `out` (default: the configured
/// data directory).
pub fn cmd_phantom(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| cfg.data_dir.clone(), Path::to_path_buf);
    let header: String = cfg.render().lines().map(|l| format!("# {l}\n")).collect();
    write_dataset(&cfg.phantom, &dir, &header).with_context(|| format!("writing dataset to {}", dir.display()))?;
    info!("wrote {} subjects to {}", cfg.phantom.num_subjects, dir.display());
    Ok(dir)
}

pub fn split(cfg: &RunConfig) -> Result<Split> {
    Ok(split_dataset(cfg.phantom.num_subjects, cfg.split, cfg.split_seed)?)
}

fn require_dataset(cfg: &RunConfig) -> Result<()> {
    if !cfg.data_dir.join(MANIFEST_FILE).is_file() {
        bail!("no dataset at {}; run `contrastmix phantom` first", cfg.data_dir.display());
    }
    Ok(())
}

/// Loads the checkpoint a stage wrote under the configured output directory.
pub fn load_stage(cfg: &RunConfig, stage: Stage, needed_by: &str) -> Result<Network<f32>> {
    let path = stage_dir(cfg, stage).join(CHECKPOINT_FILE);
    if !path.is_file() {
        bail!(
            "{needed_by} requires the {stage} checkpoint at {}; run `contrastmix train --stage {stage}` first",
            path.display()
        );
    }
    load_network(cfg, stage, &path)
}

pub fn load_network(cfg: &RunConfig, stage: Stage, path: &Path) -> Result<Network<f32>> {
    let params = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let net_cfg = cfg.train_config(stage).net_config(cfg.num_classes());
    Network::from_params(net_cfg, params).with_context(|| format!("checkpoint {} does not fit the configuration", path.display()))
}

fn prior_source(cfg: &RunConfig, needed_by: &str) -> Result<PriorSource> {
    Ok(match cfg.prior_mode {
        PriorMode::Oracle => PriorSource::Oracle {
            dilation_radius: cfg.prior_dilation,
            flip_fraction: cfg.prior_flip,
            seed: cfg.phantom.seed,
        },
        PriorMode::Coarse => PriorSource::Coarse(load_stage(cfg, Stage::Coarse, needed_by)?),
    })
}

/// Trains `stage` and writes checkpoint, loss log and config into `dir`.
pub fn train_into(cfg: &RunConfig, stage: Stage, dir: &Path) -> Result<TrainOutput> {
    require_dataset(cfg)?;
    let tc = cfg.train_config(stage);
    let who = format!("stage {stage}");
    let teacher = match stage {
        Stage::StudentContrastMix => Some(load_stage(cfg, Stage::Teacher, &who)?),
        _ => None,
    };
    let prior = match stage {
        Stage::Coarse => PriorSource::None,
        _ => prior_source(cfg, &who)?,
    };
    // The adaptation stage never opens label files unless the prior itself
    // is derived from them.
    let (with_target, with_truth) = match stage {
        Stage::StudentContrastMix => (true, false),
        _ => (false, true),
    };
    let train_ids = split(cfg)?.train;
    let subjects = load_subjects(&cfg.data_dir, &train_ids, with_target, with_truth, &prior)?;
    info!("training {stage} on {} subjects", subjects.len());
    let out = adapt::train(&tc, &subjects, cfg.num_classes(), teacher.as_ref())?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_checkpoint(dir.join(CHECKPOINT_FILE), &out.network.params)?;
    let mut csv = Vec::new();
    adapt::write_loss_csv(&mut csv, &out.log)?;
    fs::write(dir.join(LOSS_FILE), csv)?;
    echo_config(cfg, dir)?;
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainOutput> {
    train_into(cfg, stage, &stage_dir(cfg, stage))
}

/// Prior used when segmenting subject `idx` of the dataset.
fn dataset_prior(cfg: &RunConfig, prior: &PriorSource, idx: usize) -> Result<LabelMap> {
    Ok(match prior {
        PriorSource::Coarse(model) => {
            let src = normalize_hu(&mvol::read_volume(cfg.data_dir.join(source_file(idx)))?);
            coarse_prior(model, &src)?
        }
        PriorSource::Oracle { dilation_radius, flip_fraction, seed } => {
            let truth = mvol::read_labels(cfg.data_dir.join(truth_file(idx)))?;
            degrade_prior(&truth, *dilation_radius, *flip_fraction, derive_seed(*seed, "prior", idx as u64))
        }
        PriorSource::None => unreachable!("inference always has a prior"),
    })
}

/// Segments the target volume of every test subject.
pub fn cmd_infer_batch(cfg: &RunConfig, net: &Network<f32>, out: &Path) -> Result<Vec<PathBuf>> {
    require_dataset(cfg)?;
    let prior = prior_source(cfg, "inference")?;
    fs::create_dir_all(out)?;
    let predictor = NetPredictor::new(net);
    let mut written = Vec::new();
    for idx in split(cfg)?.test {
        let image = normalize_hu(&mvol::read_volume(cfg.data_dir.join(target_file(idx)))?);
        let p = dataset_prior(cfg, &prior, idx)?;
        let labels = segment_volume(&predictor, &image, &p, &cfg.geometry(), derive_seed(cfg.seed, "infer", idx as u64))?;
        let path = out.join(pred_file(idx));
        mvol::write_labels(&path, &labels)?;
        written.push(path);
    }
    echo_config(cfg, out)?;
    Ok(written)
}

/// Segments a single volume. Without an explicit prior file the coarse
/// model is applied to the volume itself.
pub fn cmd_infer_single(cfg: &RunConfig, net: &Network<f32>, volume: &Path, prior: Option<&Path>, out: &Path) -> Result<LabelMap> {
    let image = normalize_hu(&mvol::read_volume(volume).with_context(|| format!("reading {}", volume.display()))?);
    let prior = match prior {
        Some(p) => mvol::read_labels(p).with_context(|| format!("reading prior {}", p.display()))?,
        None => match cfg.prior_mode {
            PriorMode::Coarse => coarse_prior(&load_stage(cfg, Stage::Coarse, "inference")?, &image)?,
            PriorMode::Oracle => bail!("prior_mode = oracle needs an explicit --prior label file"),
        },
    };
    if prior.dims() != image.dims() {
        bail!("prior dims {:?} differ from volume dims {:?}", prior.dims(), image.dims());
    }
    let labels = segment_volume(&NetPredictor::new(net), &image, &prior, &cfg.geometry(), derive_seed(cfg.seed, "infer", 0))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    mvol::write_labels(out, &labels)?;
    Ok(labels)
}

fn pred_subjects(dir: &Path) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix('s').and_then(|r| r.strip_suffix("_pred.mvol")) {
            if let Ok(i) = idx.parse() {
                out.insert(i);
            }
        }
    }
    if out.is_empty() {
        bail!("no s<idx>_pred.mvol files in {}", dir.display());
    }
    Ok(out)
}

fn truth_for(truth_dir: &Path, idx: usize) -> Result<LabelMap> {
    let warped = truth_dir.join(target_truth_file(idx));
    let path = if warped.is_file() { warped } else { truth_dir.join(truth_file(idx)) };
    mvol::read_labels(&path).with_context(|| format!("reading {}", path.display()))
}

fn evaluate_dir(pred: &Path, truth: &Path, subjects: &BTreeSet<usize>) -> Result<Vec<OrganResult>> {
    let mut rows = Vec::new();
    for &idx in subjects {
        let t = truth_for(truth, idx)?;
        let p = mvol::read_labels(pred.join(pred_file(idx)))?;
        let organs: Vec<u8> = (1..t.num_classes() as u8).collect();
        rows.extend(evaluate_labels(idx, &p, &t, &organs).with_context(|| format!("subject {idx}"))?);
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn results_csv(rows: &[OrganResult]) -> String {
    let mut s = String::from("subject,organ,dice,msd_mm\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.subject, r.organ, r.dice, fmt_opt(r.msd));
    }
    s
}

/// Mean and sample standard deviation; `None` for no values.
fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

fn organ_stats(rows: &[OrganResult], organ: u8) -> (Vec<f64>, [String; 4]) {
    let dice: Vec<f64> = rows.iter().filter(|r| r.organ == organ).map(|r| r.dice).collect();
    let msd: Vec<f64> = rows.iter().filter(|r| r.organ == organ).filter_map(|r| r.msd).collect();
    let (d, m) = (mean_std(&dice), mean_std(&msd));
    let cols = [
        fmt_opt(d.map(|x| x.0)),
        fmt_opt(d.map(|x| x.1)),
        fmt_opt(m.map(|x| x.0)),
        fmt_opt(m.map(|x| x.1)),
    ];
    (dice, cols)
}

/// Evaluation outcome; `b` and `p_values` are present with two methods.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub a: Vec<OrganResult>,
    pub b: Option<Vec<OrganResult>>,
    pub p_values: Vec<(u8, f64)>,
}

impl EvalReport {
    /// Mean Dice over all rows of method A.
    pub fn mean_dice(&self) -> f64 {
        self.a.iter().map(|r| r.dice).sum::<f64>() / self.a.len() as f64
    }
}

pub fn cmd_eval(pred: &Path, pred_b: Option<&Path>, truth: &Path, out: &Path) -> Result<EvalReport> {
    let subjects = pred_subjects(pred)?;
    if let Some(b) = pred_b {
        let other = pred_subjects(b)?;
        if other != subjects {
            let only_a: Vec<_> = subjects.difference(&other).collect();
            let only_b: Vec<_> = other.difference(&subjects).collect();
            bail!("subject sets differ: only in {}: {only_a:?}; only in {}: {only_b:?}", pred.display(), b.display());
        }
    }
    let a = evaluate_dir(pred, truth, &subjects)?;
    let b = pred_b.map(|d| evaluate_dir(d, truth, &subjects)).transpose()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESULTS_FILE), results_csv(&a))?;
    if let Some(b) = &b {
        fs::write(out.join(RESULTS_B_FILE), results_csv(b))?;
    }
    let organs: BTreeSet<u8> = a.iter().map(|r| r.organ).collect();
    let mut summary = String::from("organ,dice_mean,dice_std,msd_mean,msd_std");
    if b.is_some() {
        summary.push_str(",b_dice_mean,b_dice_std,b_msd_mean,b_msd_std,wilcoxon_p");
    }
    summary.push('\n');
    let mut p_values = Vec::new();
    for &organ in &organs {
        let (da, cols) = organ_stats(&a, organ);
        summary.push_str(&format!("{organ},{}", cols.join(",")));
        if let Some(b) = &b {
            let (db, cols_b) = organ_stats(b, organ);
            let p = wilcoxon_signed_rank(&da, &db)?.p_value;
            p_values.push((organ, p));
            summary.push_str(&format!(",{},{p}", cols_b.join(",")));
        }
        summary.push('\n');
    }
    fs::write(out.join(SUMMARY_FILE), summary)?;
    Ok(EvalReport { a, b, p_values })
}

/// Grid of (temperature, α, β) cells: the temperature sweep at
/// (0.5, 0.5) followed by the Beta sweep at T = 0.1.
pub fn ablation_grid() -> Vec<(&'static str, f64, f64, f64)> {
    let mut rows: Vec<(&'static str, f64, f64, f64)> =
        [0.1, 0.5, 2.0, 3.0].into_iter().map(|t| ("temperature", t, 0.5, 0.5)).collect();
    rows.extend([(0.5, 0.5), (1.0, 3.0), (1.0, 5.0), (2.0, 2.0), (5.0, 1.0)].into_iter().map(|(a, b)| ("beta", 0.1, a, b)));
    rows
}

fn cell_name(t: f64, a: f64, b: f64) -> String {
    format!("T{t}_a{a}_b{b}")
}

/// Trains and evaluates the student for every ablation cell. Cells shared
/// between the two sweeps are trained once.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    require_dataset(cfg)?;
    load_stage(cfg, Stage::Teacher, "ablate")?;
    let root = cfg.out_dir.join("ablate");
    let organs = cfg.phantom.organ_ids();
    let mut csv = String::from("group,temperature,beta_alpha,beta_beta");
    for o in &organs {
        let _ = write!(csv, ",dice_{o}");
    }
    csv.push_str(",mean_dice\n");
    let mut done: Vec<(String, Vec<f64>)> = Vec::new();
    for (group, t, a, b) in ablation_grid() {
        let name = cell_name(t, a, b);
        let per_organ = match done.iter().find(|(n, _)| *n == name) {
            Some((_, d)) => d.clone(),
            None => {
                let cell = RunConfig { temperature: t, beta_alpha: a, beta_beta: b, ..cfg.clone() };
                let dir = root.join(&name);
                info!("ablation cell {name}");
                let trained = train_into(&cell, Stage::StudentContrastMix, &dir)?;
                let pred_dir = dir.join("pred");
                cmd_infer_batch(&cell, &trained.network, &pred_dir)?;
                let report = cmd_eval(&pred_dir, None, &cfg.data_dir, &dir.join("eval"))?;
                let d: Vec<f64> = organs
                    .iter()
                    .map(|&o| {
                        let v: Vec<f64> = report.a.iter().filter(|r| r.organ == o).map(|r| r.dice).collect();
                        v.iter().sum::<f64>() / v.len().max(1) as f64
                    })
                    .collect();
                done.push((name, d.clone()));
                d
            }
        };
        let mean = per_organ.iter().sum::<f64>() / per_organ.len().max(1) as f64;
        let _ = write!(csv, "{group},{t},{a},{b}");
        for d in &per_organ {
            let _ = write!(csv, ",{d}");
        }
        let _ = writeln!(csv, ",{mean}");
    }
    fs::create_dir_all(&root)?;
    let path = root.join(ABLATION_FILE);
    fs::write(&path, csv)?;
    echo_config(cfg, &root)?;
    Ok(path)
}
