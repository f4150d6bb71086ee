//! Adaptation methods applied to a pretrained checkpoint.

pub mod artifact;
pub mod baselines;
pub mod concepts;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplits, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionMetrics};
use crate::losses::LossSelection;
use crate::numeric::OptimizerConfig;
use crate::vlm::{model_id, Prompt, StepRecord, TrainConfig, TrainOutcome, VlmModel};

pub use artifact::{load_embeddings, save_embeddings, EmbeddingArtifact};
pub use baselines::{full_finetune, linear_probe, prompt_tuning, textual_inversion, textual_inversion_generation, zero_shot};
pub use concepts::{finetune_with_embeddings, init_concept_embeddings, search_concept_embeddings, ConceptEmbeddings, InitScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    ConesStage1,
    ConesStage2,
    PromptTuning,
    TextualInversion,
    LinearProbe,
    FullFinetune,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ZeroShot,
        Method::ConesStage1,
        Method::ConesStage2,
        Method::PromptTuning,
        Method::TextualInversion,
        Method::LinearProbe,
        Method::FullFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::ConesStage1 => "cones_stage1",
            Method::ConesStage2 => "cones_stage2",
            Method::PromptTuning => "prompt_tuning",
            Method::TextualInversion => "textual_inversion",
            Method::LinearProbe => "linear_probe",
            Method::FullFinetune => "full_finetune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub tokens_per_class: usize,
    pub losses: LossSelection,
    pub eval_every: usize,
    pub init: InitScheme,
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            tokens_per_class: 3,
            losses: LossSelection::DETECTION,
            eval_every: 100,
            init: InitScheme::Gaussian,
            select_best: true,
            seed: 0,
        }
    }
}

impl TuningConfig {
    /// Defaults for the second ConES stage.
    pub fn stage2() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                weight_decay: self.weight_decay,
                ..OptimizerConfig::adam(self.learning_rate)
            },
            eval_every: self.eval_every,
            losses: self.losses,
            warmup_steps: 0,
            cosine_decay: false,
            select_best: self.select_best,
            seed: self.seed,
        }
    }
}

/// Record of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRun {
    pub method: Method,
    pub base_checkpoint: String,
    pub losses: LossSelection,
    pub learning_rate: f64,
    pub steps: usize,
    pub tokens_per_class: usize,
    pub seed: u64,
    /// Scalars handed to the optimizer.
    pub unfrozen_scalars: usize,
    /// Model parameters read by the forward passes.
    pub bound_scalars: usize,
    pub text_calls: u64,
    pub best_step: usize,
    pub val: DetectionMetrics,
    pub curve: Vec<StepRecord>,
    /// Wall-clock; left out of serialized records so they stay reproducible.
    #[serde(skip)]
    pub seconds_per_step: f64,
}

/// Adapted model and prompt together with the run record.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub run: TuningRun,
    pub model: VlmModel,
    pub prompt: Prompt,
}

impl Tuned {
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<DetectionMetrics> {
        evaluate(&self.model, &self.prompt, scenes, None)
    }
}

pub(crate) fn require_frozen(model: &VlmModel) -> Result<()> {
    if let Some(p) = model.params().iter().find(|p| !p.frozen()) {
        return Err(Error::FreezeViolation(format!("`{}` is trainable in a frozen-model method", p.name)));
    }
    Ok(())
}

pub(crate) fn require_splits(splits: &DatasetSplits) -> Result<()> {
    if splits.train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    Ok(())
}

pub(crate) fn record(method: Method, base: &VlmModel, cfg: &TuningConfig, outcome: TrainOutcome) -> TuningRun {
    TuningRun {
        method,
        base_checkpoint: model_id(base),
        losses: cfg.losses,
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
        tokens_per_class: cfg.tokens_per_class,
        seed: cfg.seed,
        unfrozen_scalars: outcome.optimizer_scalars,
        bound_scalars: outcome.bound_scalars,
        text_calls: outcome.text_calls,
        best_step: outcome.best_step,
        val: outcome.best,
        curve: outcome.curve,
        seconds_per_step: outcome.seconds_per_step,
    }
}
