//! Dynamic distribution state estimation as a time-varying convex program.
//!
//! The crate is organised bottom-up:
//!
//! * [`netmodel`] builds the multiphase admittance model of a feeder and
//!   solves the nonlinear AC power-flow equations (ground truth).
//! * [`linmodel`] produces the fixed-point linearization `z = M u + m`
//!   anchored at an arbitrary voltage profile.
//! * [`sensing`] simulates and (de)serializes the measurement stream:
//!   fast PMU phasors and slow window-averaged load powers.
//! * [`cost`] materializes the per-step robust estimation objective with
//!   value, gradient and Hessian oracles plus curvature bounds.
//! * [`fopc`] is the first-order prediction-correction tracker and its
//!   convergence certificate.
//! * [`harness`] runs complete scenarios and comparison sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod cx;
mod error;
pub mod fopc;
pub mod harness;
pub mod linmodel;
pub mod netmodel;
pub mod sensing;

pub use error::{Error, Result};
