//! Numerical toolkit for fully coupled forward-backward stochastic control.
//!
//! The crate solves the generalized HJB equation with its embedded algebra
//! equation, simulates the controlled FBSDE, integrates the first and second
//! order adjoint equations, and checks the relations between the maximum
//! principle and dynamic programming along simulated optimal trajectories.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adjoint;
pub mod algebra;
pub mod assumptions;
pub mod brownian;
pub mod error;
pub mod fbsde;
pub mod hjb;
pub mod io;
pub mod problem;
pub mod regression;
pub mod verify;

pub use error::{Error, Result};
