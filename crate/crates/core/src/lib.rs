//! A desk-scale lab for concept embedding search: prompt-side embeddings
//! optimized directly against a frozen vision pathway, with the text encoder
//! removed from the loop, alongside the usual tuning baselines.

pub mod error;
pub mod eval;
pub mod experiments;
pub mod cli;
pub mod data;
pub mod losses;
pub mod nn;
pub mod numeric;
pub mod tuning;
pub mod vlm;

pub use error::{Error, Result};
