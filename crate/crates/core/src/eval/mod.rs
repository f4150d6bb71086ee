//! Detection metrics and analysis.

pub mod ap;
pub mod detect;
pub mod gap;
pub mod project;

pub use ap::{coco_thresholds, compute_ap, mask_ap, ApResult, Detection, GroundTruth};
pub use detect::{decode_detections, evaluate, nms, DecodeConfig, DetectionMetrics};
pub use gap::{alignment_embeddings, gap_report, modality_gap_report, paired_gap_report, GapReport, GapRow, GapSpace, MethodEmbeddings, ProjectedPoint};
pub use project::{project_2d, Projection};
