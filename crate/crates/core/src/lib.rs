//! Two-frame diffusion editing: a source image and an editing signal are
//! turned into a (reconstructed source, edited target) frame pair by a small
//! denoiser whose target frame attends to the source through a supervised
//! matching-attention branch.

pub mod attention;
pub mod backbone;
pub mod control;
pub mod datagen;
pub mod diffusion;
mod error;
pub mod evalkit;
pub mod formats;
pub mod image;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
