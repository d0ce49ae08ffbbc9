//! Zero-shot object counting with mined exemplars.
//!
//! A text-conditioned detector proposes boxes for the target class and for
//! the generic prompt `"object"`. The exemplar pipeline thresholds,
//! deduplicates and single-object-filters them into positive and negative
//! exemplar sets. A density counter conditioned on exemplars through
//! cross-attention is trained with a pixel MSE plus a contrastive term that
//! pushes negative-conditioned density maps away from the ground truth.

pub mod counter;
pub mod dataset;
pub mod density;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exemplar;
pub mod experiment;
pub mod filter;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod render;
pub mod rng;
pub mod sweep;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
