//! Reverse-mode automatic differentiation for small dense models.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns [`Gradients`] for every node that requires them. Values are
//! `f64` throughout.
//!
//! ```
//! use autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod adam;
mod error;
mod graph;
#[cfg(feature = "gradcheck")]
pub mod gradcheck;
mod kernels;
mod kl;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::AutodiffError;
pub use graph::{Gradients, Graph, Var};
pub use kl::{kl_categorical, KlOutcome, KL_CLAMP};
pub use tensor::Tensor;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
