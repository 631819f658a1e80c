//! A compact reverse-mode automatic differentiation engine specialised for
//! NCHW convolutional networks.
//!
//! Tensors are immutable, reference-counted buffers; every operation that
//! touches a tensor requiring a gradient records a backward rule, and
//! [`Tensor::backward`] sweeps the recorded graph in reverse creation order.
//! Convolutions lower to im2col + GEMM (`matrixmultiply`), and batch items are
//! processed on the rayon pool when the `parallel` feature is enabled.

mod element;
mod error;
pub mod exec;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod param;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use ops::conv::Conv2dConfig;
pub use ops::norm::BatchStats;
pub use optim::{Adam, AdamConfig, AdamState, StepInfo};
pub use param::{Buffer, Init, NamedValues, Param, ParamStore, Scope};
pub use tensor::{Grads, Tensor};
