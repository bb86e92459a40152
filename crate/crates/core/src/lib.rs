//! Knowledge-grounded dialogue generation with a small decoder-only
//! transformer: graph loading, input assembly, question-conditioned triple
//! weighting, knowledge attention masking, training and evaluation.

pub mod error;
pub mod eval;
pub mod graph_weight;
pub mod kg;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
