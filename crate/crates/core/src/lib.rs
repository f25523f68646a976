//! Quantization of a small transformer encoder by module-wise
//! reconstruction error minimization, with a sequential trainer and a
//! pipelined multi-worker trainer.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod partition;
pub mod quant;
pub mod report;
pub mod sequential;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{BitWidths, ForwardOutput, ModelConfig, Network, QuantPlan, QuantizedModel, TokenBatch, Transformer};
pub use params::ParamStore;
pub use tensor::Tensor;
