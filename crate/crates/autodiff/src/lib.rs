//! Reverse-mode automatic differentiation with the small set of layers the
//! trajectory model needs: dense, 2-D convolution, pooling, pointwise
//! nonlinearities, softmax, residual self-attention, GRU and bidirectional
//! LSTM cells, categorical KL, bivariate-Gaussian NLL and Adam.

pub mod checkpoint;
pub mod dist;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{he_uniform, xavier_uniform, ParamId, ParamStore};
pub use tensor::Tensor;
