//! Camera-pose regression losses with a line-of-sight term.
//!
//! The crate covers the whole loop needed to measure what the line-of-sight
//! term does: the losses and their gradients ([`loss`]), finite-difference
//! verification ([`gradcheck`]), a small multi-head regressor ([`model`]),
//! synthetic scenes and dataset parsers ([`data`]), median/histogram metrics
//! ([`eval`]), gamma grid search ([`tuning`]) and a command-line front end
//! ([`cli`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod tuning;

pub use error::{Error, Result};
