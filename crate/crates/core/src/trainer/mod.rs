//! Two-stage training: multi-teacher distillation, then multi-task fine-tuning.

mod model;
mod optim;
mod run;
mod state;

pub use model::{Model, ModelConfig, Objective, Taps};
pub use optim::{adam_update, lr_schedule, Adam};
pub use run::{group_lr, run_stage, train_step, LogLine, StageData, StageOutput, StageSource};
pub use state::{average_checkpoints, Stage, TrainState, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::datapipe::DataError;
use crate::losses::{LossError, LossWeights};
use crate::params::Group;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient in parameter {param} (group {group}); step rejected")]
    NonFinite { group: Group, param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How many tasks each sample is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only the task of the sample's source corpus.
    #[default]
    PerSampleTask,
    /// Every task with a target available for the sample.
    AllTasks,
}

/// Tasks that use their distillation loss during fine-tuning instead of the
/// supervised one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdAux {
    pub asr: bool,
    pub at: bool,
    pub sv: bool,
}

impl KdAux {
    pub fn get(&self, task: crate::task::Task) -> bool {
        use crate::task::Task;
        match task {
            Task::Asr => self.asr,
            Task::At => self.at,
            Task::Sv => self.sv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub loss_weights: LossWeights,
    pub kd_aux: KdAux,
    pub loss_mode: LossMode,
    pub epochs: u64,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Input-frame budget per batch.
    pub batch_frames: usize,
    pub ckpt_every: u64,
    pub average_last_k: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            kd_aux: KdAux::default(),
            loss_mode: LossMode::default(),
            epochs: 1,
            max_steps: None,
            base_lr: 1e-3,
            warmup_steps: 100,
            batch_frames: 800,
            ckpt_every: 100,
            average_last_k: 10,
            grad_clip: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.loss_weights.validate().map_err(|e| e.to_string())?;
        if self.average_last_k == 0 {
            return Err("average_last_k must be >= 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(format!("base_lr {} must be a non-negative number", self.base_lr));
        }
        if self.ckpt_every == 0 {
            return Err("ckpt_every must be >= 1".into());
        }
        if self.batch_frames == 0 {
            return Err("batch_frames must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err("grad_clip must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezePolicy {
    /// Fine-tuning steps during which the front-end and all blocks stay fixed.
    pub encoder_warmup_steps: u64,
    /// Keep every parameter on the SV path (front-end, blocks up to the SV tap,
    /// SV head, speaker classifier) fixed for the whole fine-tune.
    pub freeze_sv: bool,
    pub encoder_lr_scale: f64,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            encoder_warmup_steps: 50,
            freeze_sv: false,
            encoder_lr_scale: 0.2,
        }
    }
}

impl FreezePolicy {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.encoder_lr_scale > 0.0 && self.encoder_lr_scale <= 1.0) {
            return Err(format!("encoder_lr_scale {} must be in (0, 1]", self.encoder_lr_scale));
        }
        Ok(())
    }
}
