//! Multi-task proxy-based embedding learning with sign-binarized retrieval.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embfile;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod proxy;
pub mod retrieval;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, MultiTaskModel, TaskSpec, Variant};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = MultiTaskModel<f32>;
pub type Model64 = MultiTaskModel<f64>;
