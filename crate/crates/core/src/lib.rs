//! Core library for a small latent-diffusion laboratory: a deterministic
//! f32 autodiff engine, a conditional denoiser and image codec, a frozen
//! text pipeline with learnable pseudo-words, concept-inversion training,
//! and a dual-encoder evaluation protocol.
//!
//! Everything runs single-threaded on CPU with fixed reduction orders, so
//! any seeded entry point is bit-reproducible across runs.

pub mod codec;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod invert;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod testkit;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
