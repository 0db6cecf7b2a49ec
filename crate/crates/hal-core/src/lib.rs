//! Highly adaptive lasso (HAL) regression with targeted minimum-loss inference.
//!
//! The pipeline, bottom to top:
//!
//! * [`data`] — typed tabular datasets, CSV ingest, cross-validation fold
//!   plans, and bootstrap resampling.
//! * [`basis`] — enumeration of tensor-product indicator/hinge bases with
//!   knots at observed values, the design-matrix representation, and the
//!   sectional variation norm.
//! * [`solver`] — pathwise coordinate-descent lasso over those bases for
//!   squared-error and binomial loss, with an unpenalized intercept and
//!   KKT-verified fits.
//! * [`scores`] — score diagnostics along coefficient perturbation paths;
//!   the empirical analogue of "which score equations does this fit solve".
//! * [`selection`] — cross-validated lambda selection, a discrete super
//!   learner over basis specifications, and score-criterion undersmoothing.
//! * [`estimands`] — plug-in, inverse-probability-weighted, and targeted
//!   (TMLE) estimators of the treatment-specific mean and average treatment
//!   effect, including a score-preserving targeted update and a greedy
//!   collaborative propensity-ladder selector.
//! * [`bootstrap`] — model-fixed nonparametric bootstrap for plug-in
//!   features with percentile/Wald intervals and a CI-width plateau rule.
//! * [`sim`] — built-in data-generating processes, a seeded Monte Carlo
//!   harness, and a convergence-rate experiment.
//!
//! Everything downstream of a seed is deterministic: fits are exact
//! optimization outputs, Monte Carlo replicates derive per-replicate RNG
//! streams from (seed, replicate index), and aggregation never depends on
//! thread scheduling.

pub mod basis;
pub mod bootstrap;
pub mod data;
pub mod estimands;
pub mod scores;
pub mod selection;
pub mod sim;
pub mod solver;

pub(crate) mod util;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// I/O failure while reading or writing data files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A cell in a delimited input file could not be parsed. Row numbers are
    /// 1-based data rows (the header is row 0).
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Structurally invalid input: bad shapes, unknown column roles,
    /// out-of-range configuration.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numeric failure: non-convergence, non-finite intermediate values,
    /// or an optimization that cannot satisfy its tolerances.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
