//! Task objectives and their combination.

pub mod combine;
pub mod detection;
pub mod diffusion;

pub use combine::{combine_losses, LossComponents, LossSelection};
pub use detection::{box_loss, focal_loss, giou, mask_loss};
pub use diffusion::{generation_loss, sample_generation, train_denoiser, DenoiserConfig, NoiseSchedule, ToyDenoiser};
