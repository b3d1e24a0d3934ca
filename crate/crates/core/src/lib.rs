//! Recurrent conditional diffusion for reference-guided facial video
//! enhancement: a low-resolution, background-free expression video plus one
//! high-resolution identity image go in, a high-resolution video comes out.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod data;
pub mod frame;
pub mod inference;
pub mod metrics;
pub mod training;

pub use error::{Error, Result};
