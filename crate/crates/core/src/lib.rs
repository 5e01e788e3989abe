//! Video fluency assessment toolkit.
//!
//! A small double-precision tensor engine with reverse-mode gradients, the
//! temporal permuted self-attention operator, the FluNet scoring model,
//! ranked-stutter synthesis, ranking and regression losses, a softmax level
//! scorer for multimodal assessors, correlation metrics and a toy-scale
//! training driver.

pub mod conv;
pub mod cost;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod lmm;
pub mod losses;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod tpsa;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
