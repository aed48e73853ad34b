//! Layer-wise causal interventions and representation geometry for
//! decoder-only transformers.
//!
//! The crate covers a small hooked transformer ([`model`]), a desk-scale
//! Months-task trainer ([`train`]), activation traces ([`trace`]), steering
//! interventions ([`interventions`]), representational statistics
//! ([`geometry`]), the Months harness ([`months`]), corpus preparation
//! ([`corpus`]) and CSV/SVG reporting ([`report`]).

pub mod cli;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod interventions;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod months;
pub mod report;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
