//! Source-to-target adaptation: augmentation averaging, sharpening,
//! Beta-weighted mixing, the training losses and the staged trainer.

pub mod augment;
pub mod data;
pub mod loss;
pub mod mix;
pub mod pseudo;
mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::{AdamConfig, NetConfig, NnError, NormKind};
use crate::sampler::{PatchGeometry, SamplerError};

pub use augment::{augment_k, Augmentation};
pub use data::{
    coarse_prior, downsample_labels, downsample_volume, load_subjects, normalize_hu, upsample_labels, PriorSource,
    SubjectData, HU_WINDOW,
};
pub use loss::{coarse_loss, teacher_dice_loss, total_loss, unsup_loss, LossComponents, LossGrad};
pub use mix::{mix_batch, mix_batch_per_sample, MixItem};
pub use pseudo::{average_prediction, harden, sample_beta_weight, sharpen, PseudoError};
pub use train::{epoch_means, train, write_loss_csv, LossRecord, TrainOutput, LOSS_CSV_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("stage {0} requires a trained teacher checkpoint")]
    MissingTeacher(Stage),
    #[error("stage {stage} needs {what} for subject {subject}")]
    MissingData { stage: Stage, what: &'static str, subject: usize },
    #[error("no training subjects")]
    NoSubjects,
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error("dataset error: {0}")]
    Data(String),
}

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Whole-volume model on down-sampled source volumes.
    Coarse,
    /// Patch model supervised on source labels; provides pseudo-labels.
    Teacher,
    /// Student adapted to the target domain without target labels.
    StudentContrastMix,
    /// Source-only patch model used as the comparison baseline.
    StudentSupervisedBaseline,
}

impl Stage {
    pub const ALL: [Stage; 4] =
        [Stage::Coarse, Stage::Teacher, Stage::StudentContrastMix, Stage::StudentSupervisedBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Teacher => "teacher",
            Stage::StudentContrastMix => "student_contrastmix",
            Stage::StudentSupervisedBaseline => "student_supervised_baseline",
        }
    }

    /// Whether the stage fits patch models on source labels.
    pub fn is_supervised_patch(self) -> bool {
        matches!(self, Stage::Teacher | Stage::StudentSupervisedBaseline)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (expected coarse, teacher, student_contrastmix or student_supervised_baseline)"))
    }
}

/// How the student's parameters start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    Teacher,
    Scratch,
}

impl FromStr for StudentInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "scratch" => Ok(Self::Scratch),
            _ => Err(format!("unknown student init {s:?} (expected teacher or scratch)")),
        }
    }
}

impl fmt::Display for StudentInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Teacher => "teacher",
            Self::Scratch => "scratch",
        })
    }
}

/// Form of the teacher pseudo-label: its one-hot argmax, or the raw
/// probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherLabels {
    Hard,
    Soft,
}

impl FromStr for TeacherLabels {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => Err(format!("unknown teacher labels {s:?} (expected hard or soft)")),
        }
    }
}

impl fmt::Display for TeacherLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Augmented copies averaged into the target self-prediction.
    pub k: usize,
    pub temperature: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    /// Weight of the unsupervised term.
    pub lambda: f64,
    /// Weight of the squared error inside the unsupervised term.
    pub lambda_t: f64,
    pub eps_dice: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub geometry: PatchGeometry,
    /// Grid-centered patches per subject and epoch, prepared as at
    /// inference, added to the prior-guided ones.
    pub context_patches: usize,
    pub widths: Vec<usize>,
    pub norm: NormKind,
    pub adam: AdamConfig,
    /// Draw a separate mixing weight per batch element.
    pub per_sample_h: bool,
    pub student_init: StudentInit,
    pub teacher_labels: TeacherLabels,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(stage: Stage, organs: Vec<u8>) -> Self {
        Self {
            stage,
            k: 1,
            temperature: 0.1,
            beta_alpha: 0.5,
            beta_beta: 0.5,
            lambda: 1.0,
            lambda_t: 1.0,
            eps_dice: 1e-5,
            epochs: 10,
            steps_per_epoch: 40,
            geometry: PatchGeometry::desk_scale(organs),
            context_patches: 8,
            widths: vec![8, 16, 32],
            norm: NormKind::Instance,
            adam: AdamConfig::default(),
            per_sample_h: false,
            student_init: StudentInit::Teacher,
            teacher_labels: TeacherLabels::Hard,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return bad(format!("beta parameters must be positive, got ({}, {})", self.beta_alpha, self.beta_beta));
        }
        if !(self.lambda >= 0.0 && self.lambda_t >= 0.0) {
            return bad("lambda and lambda_t must be non-negative".into());
        }
        if !(self.eps_dice > 0.0) {
            return bad("eps_dice must be positive".into());
        }
        if self.stage != Stage::Coarse && self.steps_per_epoch > 0 && self.geometry.organs.is_empty() {
            return bad("patch stages need at least one organ".into());
        }
        if !(self.adam.base_lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    /// Network shape for this stage: the coarse model sees the image only,
    /// patch models see image and prior.
    pub fn net_config(&self, num_classes: usize) -> NetConfig {
        let in_channels = if self.stage == Stage::Coarse { 1 } else { 2 };
        NetConfig { in_channels, num_classes, widths: self.widths.clone(), norm: self.norm }
    }
}
