//! Inversion-regeneration latent editing for flow-matching generative models.
//!
//! - [`latent`], [`codec`], [`grid`]: latent grids, seeded noise, invertible codecs
//!   and the `OAVG` binary format.
//! - [`scheduler`]: Euler and midpoint sampling, naive and fixed-point inversion.
//! - [`oracles`]: closed-form velocity fields, Monte-Carlo and RK4 reference checks.
//! - [`attention`]: prompts, token alignment, attention editing and a toy
//!   transformer denoiser with attention hooks.
//! - [`pipeline`]: the end-to-end dual-branch edit.
//! - [`config`] and [`cli`]: JSON configuration, CSV reports and the command-line harness.

pub mod attention;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod grid;
pub mod latent;
pub mod oracles;
pub mod pipeline;
pub mod scheduler;

pub use error::{Error, Result};
