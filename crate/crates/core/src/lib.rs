//! Estimation and inference for reduced-rank regressions with a mix of
//! stationary and integrated regressors.

// Negated comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod cli;
pub mod covest;
pub mod dgp;
pub mod estimators;
pub mod linalg;
pub mod mc;
pub mod scalar;
pub mod series;

#[cfg(test)]
mod testing;

pub use scalar::Real;

/// `f64` instantiations of the generic types.
pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type Series = series::SeriesMatrix<f64>;
pub type Spec = dgp::DgpSpec<f64>;
pub type Canonical = dgp::CanonicalForm<f64>;
pub type Sample = dgp::Sample<f64>;
pub type Regression = estimators::RegressionSample<f64>;
pub type Fit = estimators::Estimate<f64>;
pub type Limit = asymptotics::LimitSample<f64>;
