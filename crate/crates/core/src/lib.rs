//! Two-step repair of trained classifiers.
//!
//! Step one identifies the training examples most responsible for a given
//! set of test-time prediction failures (influence scoring against a failure
//! query set). Step two erases those examples' effect from the model without
//! retraining from scratch (fine-tuning on the corrected data, a one-shot
//! natural-gradient deletion step, or penalised unlearning).
//!
//! Everything is built for desk-scale verifiability: models are dense and
//! small enough that exact Fisher matrices, finite-difference gradients, and
//! grid-quadrature posteriors can serve as independent oracles for each
//! approximation. See [`verify`] for the runnable check suite.

pub mod container;
pub mod datasets;
pub mod diffmodels;
pub mod error;
pub mod identify;
pub mod posterior;
pub mod repair;
pub mod stats;
pub mod treat;
pub mod verify;

pub use error::{CoreError, Result};
