//! Desk-scale laboratory for self-improving navigation reasoning.
//!
//! - [`envworld`]: seeded navigation graphs, panoramic observations, episodes.
//! - [`cotforge`]: direction mapping, caption providers, formalized labels,
//!   negative samples and reflection prompts.
//! - [`policy`]: vocabulary, the tiny causal policy, tape-based gradients.
//! - [`trainer`]: the losses and the two training stages, plus rollouts.
//! - [`metrics`]: TL / NE / SR / SPL / OSR / GP.

pub mod cotforge;
pub mod envworld;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
