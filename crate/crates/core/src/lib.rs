//! Normative modelling of neuropsychiatric symptom scores from volumetric images.
//!
//! A small residual 3D convolutional regressor is fitted on a normative
//! reference cohort to predict a symptom score (NPIQ) from anatomy. On held-out
//! visits the residual between observed and predicted score is the deviation
//! score (DNPI), which is then evaluated with logistic association models,
//! bootstrap ROC analysis and fixed-FPR operating points.
//!
//! Module map:
//!
//! - [`volnet`]: tensor kernels, the residual regressor, exact gradients, Adam, training loop
//! - [`augment`]: seeded rotation/flip/intensity augmentation
//! - [`phantom`]: synthetic cohorts with known injected deviation effects
//! - [`deviation`]: normative scoring and the DNPI residual
//! - [`stats`]: descriptive statistics, group tests, logistic regression, ROC analysis
//! - [`pipeline`]: ingest, subject-disjoint splits, run orchestration and reports
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel` feature
//! disabled every executor runs sequentially and produces identical results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cohort;
pub mod deviation;
pub mod error;
pub mod exec;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod volnet;
pub mod volume;

pub use error::{Error, Result};
pub use exec::Exec;
pub use volume::Volume;
