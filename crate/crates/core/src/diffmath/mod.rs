//! Reverse-mode differentiation over small dense row-major arrays.
//!
//! Every loss and every render in the crate is recorded on a [`Tape`] as a
//! sequence of array primitives; [`Tape::backward`] replays it in reverse.
//! [`grad_check`] is the finite-difference harness used throughout the test
//! suite.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{DiffError, Gradients, Shape, Tape, Var};
