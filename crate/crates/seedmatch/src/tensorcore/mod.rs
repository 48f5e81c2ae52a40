//! Numeric substrate: dense matrices, named parameters, reverse-mode
//! autodiff, and the engine abstraction that lets network code run either
//! eagerly or on a tape.

pub mod engine;
pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod tape;

pub use engine::{Eager, Engine, Taped};
pub use gradcheck::{finite_difference_check, CoordSample, GradCheckOutcome};
pub use matrix::{logsumexp, sigmoid, softplus, Matrix};
pub use params::{ParamId, ParamSet};
pub use tape::{Tape, Var};
