//! Deterministic dense-matrix reverse-mode automatic differentiation.
//!
//! Single-threaded per tape. Samples are rows; the only broadcast is the
//! explicit [`Tape::add_row`].

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheck};
pub use matrix::{Matrix, Real};
pub use tape::{Elementwise, NodeId, Tape};
