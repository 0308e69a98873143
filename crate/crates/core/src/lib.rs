pub mod autodiff;
pub mod distill;
pub mod encoder;
pub mod eval;
pub mod fixtures;
pub mod error;
pub mod kg;
pub mod manifest;
pub mod objective;
pub mod pipeline;
pub mod paths;
pub mod pretrain;
pub mod rules;
pub mod subgraph;

pub use error::{Error, Result};
