//! Self-grouping convolution compression.
//!
//! Filters of each layer are clustered by their importance vectors (per
//! input channel l1 norms), each cluster prunes the input channels with the
//! smallest centroid values, and the pruned model is rewritten as explicit
//! diverse group convolutions that need no sparse kernels.
//!
//! The usual flow is [`pipeline::run_algorithm1`] on a dense [`model::Model`],
//! then [`deploy::convert_model`] plus [`deploy::verify_equivalence`].

pub mod cli;
pub mod deploy;
pub mod error;
pub mod grouping;
pub mod importance;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod sweep;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
