//! Toy diffusion sampling with exact and one-step (shortcut) gradients.
//!
//! The crate is organised bottom-up:
//!
//! * [`tape`]: reverse-mode differentiation with a recording switch and
//!   stop-gradient.
//! * [`model`]: noise schedules, the tanh MLP denoiser, toy 2D data,
//!   score-matching training and checkpoints.
//! * [`sampler`]: sequential DDIM and Picard (parallel-in-time) sampling.
//! * [`grad`]: backprop-through-time, one-step, truncated, implicit-function
//!   and finite-difference gradient engines plus contraction bounds.
//! * [`opt`]: Adam, objectives, latent steering and reward fine-tuning.
//! * [`cli`]: config-driven experiment runner behind the `sdo` binary.

pub mod array;
pub mod cli;
pub mod grad;
pub mod model;
pub mod opt;
pub mod rng;
pub mod sampler;
pub mod tape;

pub use array::DenseArray;
pub use tape::{Tape, Var};
