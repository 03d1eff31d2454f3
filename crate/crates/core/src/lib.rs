//! Any-size compression of transformer language models by learned singular
//! value pruning.
//!
//! The pipeline has three stages. [`reparam`] rewrites every target linear
//! layer as `U·M(β)·Σ·Vᵀ + A·Bᵀ` with binary masks `M` driven by learnable
//! scalars `β`. [`pruner`] shrinks `β` under a growing ℓ1 penalty and turns
//! the order in which masks switch off into a global [`pruner::ScoreMap`].
//! [`compressor`] then ranks all singular values by score and materializes a
//! model at any requested size without further optimization.

pub mod autodiff;
pub mod cli;
pub mod compressor;
pub mod config;
pub mod instrument;
pub mod linalg;
pub mod lm;
pub mod persistence;
pub mod pipeline;
pub mod pruner;
pub mod reparam;
