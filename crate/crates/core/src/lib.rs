pub mod attention;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod runtime;
pub mod tagger;

pub use error::{Error, Result};
