use serde::{Deserialize, Serialize};

use crate::data::vocab::Domain;
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::eval::DetectionMetrics;
use crate::losses::LossSelection;
use crate::numeric::OptimizerConfig;
use crate::vlm::config::VlmConfig;
use crate::vlm::model::VlmModel;
use crate::vlm::prompt::Prompt;
use crate::vlm::train::{train_detection, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.05,
            warmup_steps: 100,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                weight_decay: self.weight_decay,
                ..OptimizerConfig::adam(self.learning_rate)
            },
            eval_every: self.eval_every,
            losses: LossSelection::DETECTION,
            warmup_steps: self.warmup_steps.min(self.steps),
            cosine_decay: true,
            select_best: true,
            seed: self.seed,
        }
    }
}

/// Trained model plus what produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VlmModel,
    pub step: usize,
    pub val: DetectionMetrics,
}

/// Grounding pretraining of every parameter (and the temperature) on
/// in-domain scenes, prompted with the full class-name list.
pub fn pretrain_vlm(config: &VlmConfig, splits: &DatasetSplits, pcfg: &PretrainConfig) -> Result<(Checkpoint, TrainOutcome)> {
    if splits.vocabulary.has_domain(Domain::OutDomain) {
        return Err(Error::InvalidArgument("pretraining splits must be in-domain only".into()));
    }
    let mut model = VlmModel::new(config.clone(), pcfg.seed)?;
    model.params_mut().unfreeze_all();
    let mut prompt = Prompt::class_names(&splits.vocabulary);
    let outcome = if pcfg.steps == 0 {
        None
    } else {
        Some(train_detection(
            &mut model,
            &mut prompt,
            &splits.train,
            &splits.val,
            &pcfg.train_config(),
            false,
            true,
        )?)
    };
    model.params_mut().freeze_all();
    model.reset_text_calls();
    let outcome = match outcome {
        Some(o) => o,
        None => TrainOutcome {
            curve: Vec::new(),
            evals: Vec::new(),
            best_step: 0,
            best: DetectionMetrics::default(),
            optimizer_scalars: model.params().total(),
            bound_scalars: model.params().total(),
            text_calls: 0,
            seconds_per_step: 0.0,
        },
    };
    Ok((
        Checkpoint {
            model,
            step: outcome.best_step,
            val: outcome.best,
        },
        outcome,
    ))
}
