//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: strided 2-D convolution, linear layers,
//! the usual pointwise activations, an LSTM step built from those, batch
//! normalization, dropout, (log-)softmax and the NLL / MSE losses. Shapes never
//! broadcast; any disagreement is a [`TensorError::ShapeMismatch`].
//!
//! ```
//! use itemvoice_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap(), true);
//! let p = g.softmax(x).unwrap();
//! assert_eq!(g.value(p).data(), &[0.5, 0.5]);
//! ```

mod adam;
mod checkpoint;
mod conv;
mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
mod graph;
mod lstm;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv2d_output_extent, conv2d_reference};
pub use error::{Result, TensorError};
pub use graph::{BatchNormStats, BoundParams, Graph, Var};
pub use lstm::{lstm_step, LstmWeights};
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::Tensor;
