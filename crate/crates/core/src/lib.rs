//! Training-free long video generation by diagonal (FIFO) denoising.
//!
//! A fixed-length queue holds frame latents at noise levels `1..=T`. Every
//! global step denoises each slot by one level, emits the clean head and
//! enqueues a new tail latent. On top of the plain queue this crate layers:
//!
//! * coherent tail sampling ([`freq`]): the new tail keeps the low band of the
//!   re-noised second-to-last latent and takes its high band from fresh noise;
//! * subject-aware cross-frame attention ([`attention`]): self-attention keys
//!   and values are extended with subject-masked tokens from neighbouring frames;
//! * self-recurrent guidance ([`guidance`]): an EMA bank of subject keys from the
//!   queue head steers tail latents through a key-matching gradient.
//!
//! The ε-predictors live in [`scene`]: an analytic Gaussian posterior used as a
//! sampler oracle and a small seeded attention network over synthetic scenes.

pub mod attention;
pub mod error;
pub mod freq;
pub mod guidance;
pub mod metrics;
pub mod pipeline;
pub mod queue;
pub mod rng;
pub mod scene;
pub mod schedule;

pub use error::{Error, Result};

/// A latent grid laid out as `[channel, row, col]`.
pub type Grid = ndarray::Array3<f64>;
