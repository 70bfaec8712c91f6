//! Long-term treatment effects from many weak randomized experiments.
//!
//! Historical experiments are treated as instruments for short-term
//! surrogates. A bridge function `h(S)` is learned by minimising a cross-fold
//! risk built from per-(cell, fold) means; under a linear model this is the
//! L-fold jackknife IV estimator. The crate also carries an exact
//! finite-support identification checker and the Monte Carlo harness used to
//! compare JIVE against 2SLS and the OLS surrogate index.

// `!(x > 0.0)` is used on purpose so NaN fails the check too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod estimators;
pub mod linalg;
pub mod normal;

pub use data::{aggregate, assign_folds, AggregateGrid, CellFoldAggregate, DataError, Dataset, UnitRecord};
pub use estimators::{jive_2fold_with_ci, jive_lfold, ols_surrogate_index, tsls, EstimateReport, EstimatorError, EstimatorTag};
pub mod identification;
pub mod risk;

pub use identification::{FiniteDgp, FiniteDgpSpec, IdentificationError};
pub use risk::{empirical_risk, minimize_risk_finite_class, minimize_risk_linear, BridgeFunction, RiskError, TabularBridge};
pub mod simulation;

pub use simulation::{run_sweep, simulate_dataset, GroundTruth, LinearDgpConfig, SimulationError, SweepResult, SweepSettings};
#[cfg(feature = "cli")]
pub mod cli;
