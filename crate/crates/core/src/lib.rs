//! Named entity recognition as boundary denoising: gold span boundaries are
//! noised by a fixed forward diffusion process and recovered by a learned
//! reverse process; inference generates entities in parallel from
//! Gaussian-sampled noisy spans.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod matching;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
