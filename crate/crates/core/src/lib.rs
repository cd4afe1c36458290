//! Test-time alignment of a toy diffusion model by optimising the null
//! (unconditional) embedding of classifier-free guidance under a
//! KL-regularised reward objective, with greedy particle filtering over
//! reverse-transition candidates.
//!
//! The crate is organised around the pipeline:
//!
//! - [`diffusion`]: schedules, forward/reverse transitions, Tweedie
//!   estimation, guidance, and the closed-form KL terms;
//! - [`model`] / [`data`] / [`checkpoint`]: a small conditional denoiser,
//!   synthetic mixture datasets, and a binary checkpoint format;
//! - [`grad`]: exact reverse-mode gradients and a zeroth-order estimator for
//!   black-box rewards;
//! - [`rewards`]: analytic and non-differentiable reward functions;
//! - [`align`]: the per-timestep embedding optimisation and particle
//!   filtering loop;
//! - [`baselines`]: unaligned sampling, best-of-N, per-step reward-gradient
//!   guidance, and initial-noise optimisation;
//! - [`oracles`]: independent closed-form and Monte-Carlo checks of the
//!   derivations backing the objective;
//! - [`harness`]: configuration, experiment sweeps, and result emission;
//! - [`selftest`]: the end-to-end verification suite behind `ntta selftest`.

pub mod align;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod grad;
pub mod harness;
pub mod math;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod rewards;
pub mod selftest;

pub use error::{Error, Result};
