//! Normalized convolution for confidence-equipped sparse signals.
//!
//! The crate has two faces of the same operator:
//!
//! * [`classic`] — the reference form: weighted least-squares projection of
//!   confidence-weighted neighborhoods onto a basis, with the classical
//!   output-confidence measures. Exact, epsilon-free, and used as the
//!   oracle for everything trainable.
//! * [`layer`] / [`net`] — the trainable form: a normalized-convolution
//!   CNN layer with non-negativity-constrained filters and confidence
//!   propagation, assembled into an unguided multi-scale depth-completion
//!   network.
//!
//! Around them: [`loss`] (confidence-augmented Huber loss and completion
//! metrics), [`optim`] (ADAM and the training loop), [`gradcheck`] (the
//! finite-difference harness every hand-derived gradient is validated
//! against), [`data`] (synthetic scenes and 16-bit PGM I/O), and
//! [`tensor`] (the dense f64 array those are built on, including the NCT1
//! container format).

pub mod classic;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{ConfSignal, NConvLayer, NonNeg};
pub use net::{NetSpec, NetState};
pub use tensor::{PadMode, Tensor};
