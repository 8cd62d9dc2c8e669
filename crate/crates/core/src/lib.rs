//! Sparse double descent experiments on multilayer perceptrons.
//!
//! The crate trains masked MLPs with momentum SGD, coupled weight decay and an
//! optional distillation term, prunes them by global weight magnitude round
//! after round, and analyses the resulting sparsity/accuracy curves.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod plot;
pub mod prune;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
