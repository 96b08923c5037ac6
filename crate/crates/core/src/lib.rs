//! Estimation and design for the three-parameter Emax dose-response model
//! observed at three doses.
//!
//! The exact MLE exists only when the dose means are increasing and concave.
//! This crate classifies data, computes the closed-form MLE when it exists,
//! falls back to limiting fits or Firth's modified score otherwise, and
//! computes class probabilities used to pick the central dose.

// `!(x > y)` comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod firth;
pub mod mle;
pub mod model;
pub mod prob;
pub mod quad;
pub mod rng;
pub mod shape;
pub mod sim;

pub use error::{Error, Result};
pub use firth::{firth_solve, FailureReason, FirthCorrection, SolverOpts};
pub use mle::{fit_or_limit, mle, FitResult};
pub use model::{d_optimal_design, d_optimal_x2, eta, DoseDomain, EmaxParams, NoiseModel, ThreePointDesign};
pub use prob::{shape_probabilities, ProbMethod, Scenario, ShapeProbabilities};
pub use shape::{classify, LimitingFit, ShapeClass, SufficientStats};
pub use sim::{run_table1, SimConfig, SimRow};
