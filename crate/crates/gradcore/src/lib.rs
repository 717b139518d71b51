//! Small dense-tensor library with tape-based reverse-mode automatic
//! differentiation.
//!
//! ```
//! use gradcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), Some(6.0));
//! ```

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod ste;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{GradError, Result};
pub use ste::{sample_bernoulli_ste, uniform_like};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
