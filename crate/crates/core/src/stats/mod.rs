//! Descriptive statistics, group tests, logistic association models, and
//! discrimination metrics with bootstrap intervals.

pub mod describe;
pub mod group_tests;
pub mod logit;
mod nonfinite;
pub mod roc;
pub mod special;
pub mod suites;

pub use describe::{describe, mean_sd, DescribeRow, Summary};
pub use group_tests::{mann_whitney_u, welch_t, MannWhitney, MwuMethod, WelchT};
pub use logit::{logit_fit, AssociationResult, Coefficient, DesignMatrix};
pub use roc::{
    bootstrap, bootstrap_auc, fixed_fpr_operating_point, roc_auc, trapezoid_auc, BootstrapConfig, BootstrapResult,
    Confusion, OperatingPoint, ResampleUnit, RocCurve, RocPoint,
};
pub use suites::{
    association_suite, discrimination_suite, join, AdjustmentSet, AssociationRow, Covariate, DiscriminationOptions,
    DiscriminationReport, Joined, ModelSpec, Predictor, SuiteOptions,
};
