//! Numeric foundation: matrices, deterministic RNG streams, the reverse-mode
//! tape, parameter sets, and gradient checking.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{Matrix, Scalar};
pub use params::{absorb_gradients, bind, Binding, Param, ParamId, ParamSet};
pub use rng::RngStream;
pub use tape::{BatchStats, Gradients, Tape, Var, PROB_FLOOR};
