//! Temporal-aware TopK sparse autoencoders (TIDE) for diffusion-transformer
//! activations: data generation against a frozen toy DiT, a binary dump
//! format, training with hand-derived gradients, evaluation, feature
//! analysis, and latent editing.

pub mod activation_gen;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod dump;
pub mod edit;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod rng;
pub mod sae;
pub mod train;

pub use error::{Result, TideError};
