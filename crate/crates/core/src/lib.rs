//! Concept-level explanations for a miniature contrastive vision-language
//! model, with training objectives that make those explanations
//! disentangled and localized.

pub mod concepts;
mod error;
pub mod explain;
pub mod format;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{DealError, Result};
