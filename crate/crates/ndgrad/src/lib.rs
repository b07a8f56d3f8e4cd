//! Dense double-precision tensors and a dynamic reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse creation
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.
//!
//! Learnable parameters live in a [`ParamSet`] outside the graph. Each
//! training step binds them into a fresh graph, evaluates a loss, runs
//! backward and hands the collected gradients to an optimizer such as
//! [`Adam`].
//!
//! ```
//! use ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

pub mod check;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{central_difference, op_gradient_report, relative_error};
pub use error::GradError;
pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Checkpoint, NamedTensor, ParamSet};
pub use tensor::Tensor;

pub type Result<T, E = GradError> = std::result::Result<T, E>;
