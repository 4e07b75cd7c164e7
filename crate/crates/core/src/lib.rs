//! Training neural networks as permutation-equivariant particle systems and
//! measuring how the step size constrains the topology of the neuron cloud.
//!
//! Modules follow the pipeline: [`particles`] and [`rules`] define the
//! dynamics, [`models`] supplies the two-layer networks and data,
//! [`sharpness`] estimates the top Hessian eigenvalue `K` and the critical
//! step `1/K`, [`topology`] computes Vietoris–Rips Betti numbers,
//! [`geometry`] samples structured initial clouds, [`diagnostics`] checks
//! trajectories against the bi-Lipschitz bounds, and [`harness`] runs
//! configured experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod models;
pub mod particles;
pub mod rules;
pub mod sharpness;
pub mod topology;

pub use error::{Error, Result};
