//! Nonlinear inductive matrix completion.
//!
//! Ratings are modeled as `A(x, y) = Σᵢ φ(uᵢᵀx)·φ(vᵢᵀy)` for user features
//! `x`, item features `y` and an elementwise activation `φ`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod activations;
pub mod data;
pub mod hessian;
pub mod error;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod pipelines;
pub mod quadrature;
pub mod rng;
pub mod tensor_init;
pub mod types;

pub use activations::{gamma_sigma, moment_table, ActivationKind, MomentTable};
pub use error::{NimcError, Result};
pub use model::{gradient, loss, predict, GradientPair, LossValue, ReluFixedRow};
pub use rng::RngSeed;
pub use types::{FactorPair, FeatureSet, Observation, ObservationSet};
