//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; every key may appear at most
//! once and unknown keys are rejected. The resolved configuration renders
//! back into the same format, so a run directory can be replayed from its
//! echoed `config.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use contrastmix::adapt::{Stage, StudentInit, TeacherLabels, TrainConfig};
use contrastmix::nn::{AdamConfig, NormKind};
use contrastmix::phantom::{OrganSpec, PhantomConfig};
use contrastmix::sampler::PatchGeometry;
use contrastmix::{Dims, Spacing};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("invalid value for `{key}`: {reason}")]
    Value { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Degraded ground truth.
    Oracle,
    /// Output of the trained coarse model on the source volume.
    Coarse,
}

impl FromStr for PriorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "coarse" => Ok(Self::Coarse),
            _ => Err(format!("expected oracle or coarse, got {s:?}")),
        }
    }
}

impl PriorMode {
    fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Coarse => "coarse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub prior_mode: PriorMode,
    pub prior_dilation: usize,
    pub prior_flip: f64,
    pub patch_dims: Dims,
    pub centers_per_organ: usize,
    pub context_patches: usize,
    pub widths: Vec<usize>,
    pub norm: NormKind,
    pub k: usize,
    pub temperature: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub lambda: f64,
    pub lambda_t: f64,
    pub eps_dice: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub student_epochs: usize,
    pub student_steps_per_epoch: usize,
    pub coarse_epochs: usize,
    pub coarse_steps_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub per_sample_h: bool,
    pub student_init: StudentInit,
    pub teacher_labels: TeacherLabels,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            split: [0.75, 0.125, 0.125],
            split_seed: 0,
            prior_mode: PriorMode::Coarse,
            prior_dilation: 2,
            prior_flip: 0.1,
            patch_dims: Dims::new(24, 24, 12),
            centers_per_organ: 8,
            context_patches: 8,
            widths: vec![8, 16, 32],
            norm: NormKind::Instance,
            k: 1,
            temperature: 0.1,
            beta_alpha: 0.5,
            beta_beta: 0.5,
            lambda: 1.0,
            lambda_t: 1.0,
            eps_dice: 1e-5,
            epochs: 10,
            steps_per_epoch: 40,
            student_epochs: 10,
            student_steps_per_epoch: 40,
            coarse_epochs: 10,
            coarse_steps_per_epoch: 18,
            lr: 1e-4,
            weight_decay: 0.0,
            decay_every: 5,
            decay_factor: 0.9,
            per_sample_h: false,
            student_init: StudentInit::Teacher,
            teacher_labels: TeacherLabels::Hard,
            seed: 0,
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn parse_triple<T: FromStr + Copy>(s: &str) -> Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let v = parse_list::<T>(s)?;
    <[T; 3]>::try_from(v).map_err(|v| format!("expected three values, got {}", v.len()))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

fn parse_organs(s: &str) -> Result<Vec<OrganSpec>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(i, part)| {
            let v = parse_list::<f64>(part)?;
            if v.len() != 8 {
                return Err(format!("organ {}: expected cx,cy,cz,ax,ay,az,source_hu,target_hu", i + 1));
            }
            Ok(OrganSpec {
                class_id: u8::try_from(i + 1).map_err(|_| "too many organs".to_string())?,
                center: [v[0], v[1], v[2]],
                semi_axes: [v[3], v[4], v[5]],
                source_hu: v[6] as f32,
                target_hu: v[7] as f32,
            })
        })
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "dims",
    "spacing",
    "background_hu",
    "organs",
    "noise_sigma",
    "center_jitter",
    "misalignment",
    "num_subjects",
    "phantom_seed",
    "split",
    "split_seed",
    "prior_mode",
    "prior_dilation",
    "prior_flip",
    "patch_dims",
    "centers_per_organ",
    "context_patches",
    "widths",
    "norm",
    "k",
    "temperature",
    "beta_alpha",
    "beta_beta",
    "lambda",
    "lambda_t",
    "eps_dice",
    "epochs",
    "steps_per_epoch",
    "student_epochs",
    "student_steps_per_epoch",
    "coarse_epochs",
    "coarse_steps_per_epoch",
    "lr",
    "weight_decay",
    "decay_every",
    "decay_factor",
    "per_sample_h",
    "student_init",
    "teacher_labels",
    "seed",
];

impl RunConfig {
    /// Parses configuration text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(ConfigError::UnknownKey { line: n + 1, key: key.to_string() });
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate { line: n + 1, key: key.to_string() });
            }
            seen.push(known);
            cfg.set(known, value)
                .map_err(|reason| ConfigError::Value { key: key.to_string(), reason })?;
        }
        for dir in [&mut cfg.data_dir, &mut cfg.out_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
        }
        let p = &mut self.phantom;
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dims" => p.dims = Dims::from_array(parse_triple(v)?),
            "spacing" => {
                let [x, y, z] = parse_triple::<f32>(v)?;
                p.spacing = Spacing::new(x, y, z).map_err(|e| e.to_string())?;
            }
            "background_hu" => p.background_hu = num(v)?,
            "organs" => p.organs = parse_organs(v)?,
            "noise_sigma" => p.noise_sigma = num(v)?,
            "center_jitter" => p.center_jitter = num(v)?,
            "misalignment" => p.misalignment = num(v)?,
            "num_subjects" => p.num_subjects = num(v)?,
            "phantom_seed" => p.seed = num(v)?,
            "split" => self.split = parse_triple(v)?,
            "split_seed" => self.split_seed = num(v)?,
            "prior_mode" => self.prior_mode = v.parse()?,
            "prior_dilation" => self.prior_dilation = num(v)?,
            "prior_flip" => self.prior_flip = num(v)?,
            "patch_dims" => self.patch_dims = Dims::from_array(parse_triple(v)?),
            "centers_per_organ" => self.centers_per_organ = num(v)?,
            "context_patches" => self.context_patches = num(v)?,
            "widths" => self.widths = parse_list(v)?,
            "norm" => {
                self.norm = match v {
                    "instance" => NormKind::Instance,
                    "none" => NormKind::None,
                    _ => return Err(format!("expected instance or none, got {v:?}")),
                }
            }
            "k" => self.k = num(v)?,
            "temperature" => self.temperature = num(v)?,
            "beta_alpha" => self.beta_alpha = num(v)?,
            "beta_beta" => self.beta_beta = num(v)?,
            "lambda" => self.lambda = num(v)?,
            "lambda_t" => self.lambda_t = num(v)?,
            "eps_dice" => self.eps_dice = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "steps_per_epoch" => self.steps_per_epoch = num(v)?,
            "student_epochs" => self.student_epochs = num(v)?,
            "student_steps_per_epoch" => self.student_steps_per_epoch = num(v)?,
            "coarse_epochs" => self.coarse_epochs = num(v)?,
            "coarse_steps_per_epoch" => self.coarse_steps_per_epoch = num(v)?,
            "lr" => self.lr = num(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "decay_every" => self.decay_every = num(v)?,
            "decay_factor" => self.decay_factor = num(v)?,
            "per_sample_h" => self.per_sample_h = parse_bool(v)?,
            "student_init" => self.student_init = v.parse()?,
            "teacher_labels" => self.teacher_labels = v.parse()?,
            "seed" => self.seed = num(v)?,
            _ => unreachable!("key list and setter agree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| Err(ConfigError::Value { key: key.into(), reason });
        if let Err(e) = self.phantom.validate() {
            return bad("phantom", e.to_string());
        }
        if self.patch_dims.is_empty() {
            return bad("patch_dims", "extents must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths", "need at least one positive width".into());
        }
        if !(0.0..=1.0).contains(&self.prior_flip) {
            return bad("prior_flip", format!("{} is not in [0, 1]", self.prior_flip));
        }
        if self.decay_every == 0 {
            return bad("decay_every", "must be at least 1".into());
        }
        for stage in Stage::ALL {
            if let Err(e) = self.train_config(stage).validate() {
                return bad("training", e.to_string());
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.phantom.num_classes()
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            patch_dims: self.patch_dims,
            centers_per_organ: self.centers_per_organ,
            organs: self.phantom.organ_ids(),
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let (epochs, steps_per_epoch) = match stage {
            Stage::Coarse => (self.coarse_epochs, self.coarse_steps_per_epoch),
            Stage::StudentContrastMix => (self.student_epochs, self.student_steps_per_epoch),
            _ => (self.epochs, self.steps_per_epoch),
        };
        TrainConfig {
            stage,
            k: self.k,
            temperature: self.temperature,
            beta_alpha: self.beta_alpha,
            beta_beta: self.beta_beta,
            lambda: self.lambda,
            lambda_t: self.lambda_t,
            eps_dice: self.eps_dice,
            context_patches: self.context_patches,
            epochs,
            steps_per_epoch,
            geometry: self.geometry(),
            widths: self.widths.clone(),
            norm: self.norm,
            adam: AdamConfig {
                base_lr: self.lr,
                weight_decay: self.weight_decay,
                decay_every: self.decay_every,
                decay_factor: self.decay_factor,
                ..AdamConfig::default()
            },
            per_sample_h: self.per_sample_h,
            student_init: self.student_init,
            teacher_labels: self.teacher_labels,
            seed: self.seed,
        }
    }

    /// Fully resolved configuration in the input format.
    pub fn render(&self) -> String {
        let p = &self.phantom;
        let organs = p
            .organs
            .iter()
            .map(|o| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    o.center[0], o.center[1], o.center[2], o.semi_axes[0], o.semi_axes[1], o.semi_axes[2], o.source_hu, o.target_hu
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        let norm = match self.norm {
            NormKind::Instance => "instance",
            NormKind::None => "none",
        };
        let values: Vec<String> = vec![
            self.data_dir.display().to_string(),
            self.out_dir.display().to_string(),
            join(&p.dims.as_array(), ","),
            join(&[p.spacing.dx, p.spacing.dy, p.spacing.dz], ","),
            p.background_hu.to_string(),
            organs,
            p.noise_sigma.to_string(),
            p.center_jitter.to_string(),
            p.misalignment.to_string(),
            p.num_subjects.to_string(),
            p.seed.to_string(),
            join(&self.split, ","),
            self.split_seed.to_string(),
            self.prior_mode.name().to_string(),
            self.prior_dilation.to_string(),
            self.prior_flip.to_string(),
            join(&self.patch_dims.as_array(), ","),
            self.centers_per_organ.to_string(),
            self.context_patches.to_string(),
            join(&self.widths, ","),
            norm.to_string(),
            self.k.to_string(),
            self.temperature.to_string(),
            self.beta_alpha.to_string(),
            self.beta_beta.to_string(),
            self.lambda.to_string(),
            self.lambda_t.to_string(),
            self.eps_dice.to_string(),
            self.epochs.to_string(),
            self.steps_per_epoch.to_string(),
            self.student_epochs.to_string(),
            self.student_steps_per_epoch.to_string(),
            self.coarse_epochs.to_string(),
            self.coarse_steps_per_epoch.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.decay_every.to_string(),
            self.decay_factor.to_string(),
            self.per_sample_h.to_string(),
            self.student_init.to_string(),
            self.teacher_labels.to_string(),
            self.seed.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_roundtrips() {
        let cfg = RunConfig::parse("", Path::new("/base")).unwrap();
        let back = RunConfig::parse(&cfg.render(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# comment\n\ntemperature = 0.5  # trailing\nwidths = 4, 8\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.temperature, 0.5);
        assert_eq!(cfg.widths, vec![4, 8]);
        assert_eq!(cfg.data_dir, PathBuf::from("/base/data"));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let e = RunConfig::parse("noise_sgima = 3\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("noise_sgima"));
        let e = RunConfig::parse("k = 1\nk = 2\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Duplicate { line: 2, .. }));
        assert!(matches!(RunConfig::parse("just words\n", Path::new(".")), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["temperature = 0", "k = 0", "prior_mode = magic", "widths = 8,x", "dims = 4,4", "beta_alpha = -1"] {
            assert!(RunConfig::parse(text, Path::new(".")).is_err(), "{text}");
        }
    }

    #[test]
    fn organs_parse_in_order() {
        let cfg = RunConfig::parse("organs = 5,5,5,2,2,2,100,50; 10,10,10,3,3,3,200,80\n", Path::new(".")).unwrap();
        assert_eq!(cfg.phantom.organs.len(), 2);
        assert_eq!(cfg.phantom.organs[1].class_id, 2);
        assert_eq!(cfg.phantom.organs[1].target_hu, 80.0);
        assert_eq!(cfg.num_classes(), 3);
    }
}
