//! Instrumental-variable estimators of local average treatment effects with
//! covariates: saturated cell aggregation, linear and interacted 2SLS,
//! propensity-weighted LATE, specification and validity tests, and
//! jackknife estimators for many instruments.

pub mod cells;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod many_iv;
pub mod montecarlo;
pub mod propensity;
pub mod regression;
pub mod report;
pub mod reset;
pub mod validity;
