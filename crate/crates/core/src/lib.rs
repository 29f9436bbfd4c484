//! Joint entity and relation extraction with a three-stream stacked
//! attention network over an extended BIO tagging scheme.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod stack;
pub mod tagging;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
