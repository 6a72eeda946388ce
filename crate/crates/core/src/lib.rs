//! Regime-switching particle filters with learnable candidate models.
//!
//! The crate simulates switching state-space models ([`ssm`]), runs four
//! particle filters over them ([`filters`]), and trains neural dynamic and
//! measurement models end to end ([`neural`], [`training`]) through a small
//! scalar reverse-mode autodiff engine ([`autodiff`]). [`dataset`] handles
//! trajectory files, [`metrics`] the RMSE summaries, and [`cli`] wires the
//! pieces into the `rsdbpf` command.

// NaN-rejecting checks are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod filters;
mod io;
pub mod metrics;
pub mod neural;
pub mod seed;
pub mod ssm;
pub mod training;

mod error;

pub use error::{Error, Result};
