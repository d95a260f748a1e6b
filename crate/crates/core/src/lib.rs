//! Joint optimal power flow and state estimation for radial distribution
//! feeders, with a CVaR-constrained stochastic variant.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod devices;
pub mod estimation;
pub mod network;
pub mod runner;
pub mod scenario;
pub mod sensing;
