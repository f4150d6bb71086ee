//! The miniature dual-stream vision-language model.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod train;

pub use align::alignment_scores;
pub use checkpoint::{load_checkpoint, model_id, save_checkpoint};
pub use config::VlmConfig;
pub use model::{FusionOutput, HeadOutputs, ParamCounts, Span, VlmModel};
pub use prompt::{Prompt, PromptKind};
pub use train::{train_detection, StepRecord, TrainConfig, TrainOutcome};
pub use pretrain::{pretrain_vlm, Checkpoint, PretrainConfig};
