//! Linear-projection Conformer pipeline for visual and audio-visual speech
//! recognition, built on a small reverse-mode autodiff engine.

pub mod alloc;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod conformer;
pub mod error;
pub mod frontends;
pub mod features;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod robustness;
pub mod tensor;
pub mod train;
pub mod transducer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
