//! Differentiable building blocks on a small reverse-mode tape.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamStore, Tensor};
