//! Deterministic synthetic grounding scenes.

pub mod dataset;
pub mod scene;
pub mod vocab;

pub use dataset::{load_dataset, make_splits, ratio_split, save_dataset, DatasetConfig, DatasetSplits};
pub use scene::{generate_scene, BBox, Scene, SceneConfig};
pub use vocab::{Domain, Vocabulary};
