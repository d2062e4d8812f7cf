pub mod alloc;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use graph::{Conv2dOpts, Gradients, Graph, Var};
pub use tensor::{DType, Real, Tensor};
