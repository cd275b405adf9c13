//! Bimodal fusion of a time series and an image with a small reverse-mode
//! autodiff engine, the encoders, the fusion module and an SGD trainer.

pub mod atd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tensor_file;
pub mod training;

pub use error::{AtdError, Result};
pub use graph::{ComputationRecord, Graph, OpKind, Var};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::{Fill, Tensor};
