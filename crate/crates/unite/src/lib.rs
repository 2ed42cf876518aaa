//! Single-stage joint tokenization and latent flow-matching generation.
//!
//! One transformer — the generative encoder — serves both as an image
//! tokenizer and as a latent denoiser through shared weights. A lightweight
//! decoder maps latents back to pixels. Training jointly optimizes a pixel
//! reconstruction loss and a latent flow-matching loss in a single stage.
//!
//! The crate is self-contained: dense f32 tensors with reverse-mode
//! autodiff, AdamW, a synthetic shape dataset, binary tensor/checkpoint
//! formats, probe-feature Fréchet evaluation, and the analysis instruments
//! (CKA/CKNNA alignment, trajectory decoding, weight-entropy accounting).

use mimalloc::MiMalloc;

/// Training rebuilds megabyte-scale activation buffers every step; an
/// allocator that retains and reuses large chunks removes the mmap and
/// page-fault churn that otherwise dominates.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Result, UniteError};
