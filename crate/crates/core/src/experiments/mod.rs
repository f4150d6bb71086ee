//! Configured experiment pipelines over a persistent artifact store.

pub mod ablate;
pub mod analysis;
pub mod config;
pub mod lab;
pub mod report;
pub mod session;

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable, Metric};
pub use analysis::{gap_analysis, generation_study, GapAnalysis, GenerationStudy};
pub use config::{load_config, parse_config, ExperimentConfig, PretrainScale};
pub use lab::{Lab, LedgerEntry, ReportRow, RunRecord, RunResult, RunSpec};
pub use session::{Session, PIPELINE_METHODS};
