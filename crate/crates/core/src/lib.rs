//! Donor selection for linear synthetic control by spillover detection.
//!
//! Every donor is forecast one step past the intervention from the lagged
//! donor pool fitted on pre-intervention data only; donors whose observed
//! value escapes the forecast are treated as contaminated by spillover. The
//! crate also carries the structural simulator used to study the procedure,
//! synthetic control estimation (plain, sparse-prior and proxy-debiased),
//! bias bounds for selection errors and a Monte Carlo harness.

pub mod error;
pub mod estimate;
pub mod exec;
pub mod experiment;
pub mod panel;
pub mod proximal;
pub mod regression;
pub mod rng;
pub mod select;
pub mod sensitivity;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Execution;
pub use panel::{NormalizationParams, Panel};
