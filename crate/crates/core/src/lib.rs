//! Stratified risk-limiting audits.
//!
//! Per-stratum evidence comes from nonnegative supermartingales (ALPHA and
//! empirical Bernstein). Strata are combined with Fisher's method or an
//! intersection supermartingale, and the combined P-value is maximised over
//! the union of intersection nulls by grid search (two strata) or linear
//! programming (EB, any number of strata).

pub mod assorter;
pub mod combiner;
pub mod engine;
pub mod error;
pub mod ingest;
pub mod lp;
pub mod martingale;
pub mod population;
pub mod selector;
pub mod service;
pub mod sim;

pub use error::{AuditError, Result};
