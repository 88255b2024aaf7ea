pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use model::{count_params, Model, ModelConfig, ParamCount};
pub use moe::{ExpertParams, RouterOutput};
pub use numerics::{Graph, NodeId, Real, Tensor};
