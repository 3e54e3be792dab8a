//! Sketch-to-logo retrieval: a triple-branch embedding network with a
//! large-kernel first convolution and hybrid channel/spatial attention,
//! trained with a triplet margin loss and evaluated by gallery ranking.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod persistence;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
