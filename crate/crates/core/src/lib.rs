pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod kg;
pub mod model;
pub mod pretrain;
pub mod sampler;
pub mod scalar;
pub mod sequence;
pub mod synthetic;
pub mod tasks;

pub use autodiff::Tensor;
pub use error::{Error, ErrorClass, Result};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
