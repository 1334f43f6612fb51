//! Dense f32 tensors and a reverse-mode tape.
//!
//! A [`DenseTensor`] is a plain row-major value grid. Differentiation happens on a
//! [`Tape`]: every operation records its inputs and a backward rule, and
//! [`Tape::backward`] consumes the tape to produce [`Gradients`].

mod dense;
pub mod kernels;
mod ops;
mod tape;

pub use dense::DenseTensor;
pub use ops::{BinaryKind, ConvMode, ConvSpec, UnaryKind};
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
