//! Online clustering of fixed-dimension feature streams.

pub mod distill;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gaussian;
pub mod merge;
pub mod mixture;
pub mod split;
pub mod stream;

pub use error::{OcfError, Result};
