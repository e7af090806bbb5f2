//! Session-based next-item recommendation over a hop-weighted global item
//! graph, with a single-positive contrastive term on item representations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
