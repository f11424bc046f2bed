//! Dense `f32`/`f64` tensors and a reverse-mode automatic differentiation
//! tape covering the convolution, attention and normalization ops needed by
//! a hybrid CNN/transformer autoencoder.
//!
//! ```
//! use ctsae_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec([1], vec![3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{conv2d_output_size, conv_transpose2d_output_size, BatchNormMode, RunningStats};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

#[doc(hidden)]
pub use ops::elementwise::gelu_scalar;
