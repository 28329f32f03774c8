//! Self-supervised despeckling of coherent (sonar/radar) imagery in the log domain.

pub mod checkpoint;
pub mod config;
pub mod evalkit;
pub mod io;
pub mod objective;
pub mod optim;
pub mod rpn;
pub mod speckle;
pub mod tensor;
pub mod training;

pub use tensor::{Axis, Graph, Padding, Real, Shape, Tensor, TensorError, Var};
