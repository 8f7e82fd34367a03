//! Backward-factorized variational smoothing for state-space models.
//!
//! Exact Kalman inference, backward variational families with closed-form and
//! recursive ELBOs, amortized inference networks, a particle smoother used as
//! a reference, and an exact finite-state checker of the additive smoothing
//! error bound.

pub mod amortized;
pub mod autodiff;
pub mod discrete;
pub mod error;
pub mod experiments;
pub mod ffbsi;
pub mod gauss;
pub mod kalman;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod ssm;
pub mod variational;

pub use error::{Error, Result};
