pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod corpus;
pub mod layers;
pub mod model;
pub mod ref_attention;
pub mod ref_encoder;
pub mod train;

pub use error::{Error, Result};
