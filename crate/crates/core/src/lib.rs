//! Desk-scale latent diffusion for missing-modality volume imputation.
//!
//! The pipeline: per-modality volumetric VAEs compress volumes 8x per axis
//! into a compact latent space; a conditional DDPM learns to synthesize the
//! latent of a missing modality from whatever other modalities a subject has,
//! steered by clinical text prompts and an availability mask; decoded samples
//! are averaged over Monte Carlo folds and scored within a brain mask.
//!
//! Everything runs on the CPU on top of a small tape-based reverse-mode
//! autodiff engine ([`tensor`]). Synthetic phantom cohorts ([`phantom`])
//! stand in for clinical data so the whole system is reproducible from a
//! seed.

pub mod checkpoint;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod parallel;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
