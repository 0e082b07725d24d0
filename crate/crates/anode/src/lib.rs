//! Gradient engines for ODE-defined residual blocks.
//!
//! A residual block `z1 = z0 + f(z0, theta)` is the one-step forward Euler
//! discretization of the autonomous ODE `dz/dt = f(z, theta)`. This crate
//! integrates such blocks with explicit Runge-Kutta schemes and provides three
//! ways of backpropagating a loss gradient through the integration:
//!
//! * [`adjoint::dto_gradient`] — discretize-then-optimize: exact reverse-mode
//!   differentiation of the time-stepping recursion, replayed from a recorded
//!   (or checkpoint-reconstructed) stage tape.
//! * [`adjoint::otd_gradient_stored`] — optimize-then-discretize: the
//!   continuous adjoint ODE solved backward on the forward grid, reading the
//!   state from the stored forward trajectory.
//! * [`adjoint::otd_gradient_reverse`] — optimize-then-discretize with the
//!   state reconstructed by integrating the negated field backward from the
//!   block output instead of storing anything.
//!
//! The [`checkpoint`] module trades memory for recomputation during multi-block
//! backpropagation (per-block input checkpointing, uniform thinning, and
//! optimal binomial schedules), [`diagnostics`] quantifies how badly reverse
//! flows lose the initial condition, and [`train`] runs small supervised
//! experiments that contrast the pipelines end to end.

pub mod adjoint;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod network;
pub mod pgm;
pub mod rng;
pub mod solvers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
