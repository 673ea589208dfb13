//! Latent dataset distillation through a frozen diffusion prior.
//!
//! The library builds a small latent diffusion stack (autoencoder, noise
//! predictor, class embedder) on a procedurally generated image corpus, then
//! learns a handful of synthetic latent codes and conditioning codes by
//! backpropagating distillation losses through the reverse diffusion chain.
//! The reverse process comes in two flavors: the standard update, whose
//! gradients vanish as the chain grows, and a skip-connected update that
//! injects the initial noisy state into every step with linearly decaying
//! weight, keeping gradients alive. Diagnostics quantify both behaviors.
//!
//! Entry points:
//! - [`tape`]: reverse-mode differentiation with checkpointed segments
//! - [`diffusion`]: schedules, forward noising, and the two reverse steps
//! - [`models`]: the frozen generative stack and witness networks
//! - [`distill`]: DC / DM / MTT losses and the outer optimization loop
//! - [`diagnostics`]: gradient probes, path decomposition, SNR, FD checks
//! - [`eval`]: downstream accuracy protocol over unseen architectures
//! - [`cli`]: the `ld3m` binary surface and on-disk artifact formats

pub mod array;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod rng;
pub mod schedule;
pub mod tape;

pub use array::DiffArray;
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Tape, Var};
