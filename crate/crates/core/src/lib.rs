//! Hierarchical graph networks for lifting 2D human joints to 3D.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geom;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Hgn64 = model::Hgn<f64>;
pub type Hgn32 = model::Hgn<f32>;
