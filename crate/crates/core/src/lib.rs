//! Relation-preserving triplet mining for re-identification.
//!
//! The pipeline: binary features per image ([`features`]), verified match
//! counts between same-identity images ([`gmsmatch`], [`relational`]),
//! positives chosen by those counts and batch-hard negatives ([`mining`]),
//! a small embedding network ([`learn`]) and ranking metrics
//! ([`evalrank`]). [`synth`] generates pose-grouped data with known
//! natural groups.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evalrank;
pub mod features;
pub mod gmsmatch;
pub mod imageio;
pub mod learn;
pub mod mining;
pub mod pipeline;
pub mod relational;
pub mod rng;
pub mod synth;

pub use config::{EvalConfig, RunConfig};
pub use error::{Error, Result};
