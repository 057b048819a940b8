//! Expandable shallow convolutional network for multi-session EEG
//! motor-imagery decoding.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`layers`] and [`rng`]: dense arithmetic, the layer kernels
//!   with their analytic gradients, and seedable random streams.
//! - [`model`]: the network as a mutable architecture that can be widened
//!   and pruned filter-group by filter-group, plus its checkpoint format.
//! - [`train`]: sparse and group-sparse objectives, Adam, the expansion
//!   trigger and the per-session training loop.
//! - [`pipeline`]: multi-session carry-over and pseudo-online evaluation.
//! - [`data`]: synthetic EEG-like trials with inter-session drift and the
//!   EEGX dataset format.
//! - [`csp`]: the CSP + LDA reference pipeline.
//! - [`embed`]: feature export, exact t-SNE and silhouette scoring.
//! - [`report`]: comparison tables across methods.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is on and plain iterators otherwise. Every parallel
//! loop writes disjoint outputs or reduces in a fixed order, so results are
//! bitwise identical with or without the feature and for any thread count.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bytes;
pub mod csp;
pub mod data;
pub mod embed;
mod error;
pub mod layers;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RandomStream;
pub use tensor::Tensor;
