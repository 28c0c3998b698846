//! Unbiased randomized Chebyshev estimators for spectral sums `tr f(A)` and
//! their gradients, variance-optimal truncation-degree distributions, and
//! projected SGD / SVRG optimizers driven by them.
//!
//! The crate is organised bottom-up:
//!
//! * [`chebyshev`] scalar series machinery on an interval `[a, b]`;
//! * [`degree_dist`] truncation-degree distributions and the variance functional;
//! * [`probes`] matrix oracles and Hutchinson-style spectral-sum estimators;
//! * [`grad_est`] unbiased gradients of spectral sums;
//! * [`optimize`] projected SGD and SVRG;
//! * [`reference`] dense brute-force oracles;
//! * [`tasks`] matrix completion and Gaussian-process learning;
//! * [`cli`] the command-line front end.

pub mod chebyshev;
pub mod cli;
pub mod degree_dist;
pub mod error;
pub mod function;
pub mod grad_est;
pub mod linalg;
pub mod optimize;
pub mod probes;
pub mod reference;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
