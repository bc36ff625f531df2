//! Conditional independence testing with the generalised covariance measure.

pub mod data;
pub mod error;
pub mod gcm;
pub mod kernel;
pub mod multi;
pub mod nfl;
pub mod regression;
pub mod rng;
pub mod sim;
pub mod stat;

pub use data::DataSet;
pub use error::GcmError;
pub use gcm::{
    expected_cond_cov_ci, gcm_statistic, gcm_test, naive_resid_corr_test, residual_products,
    CondCovEstimate, Diagnostics, GcmResult, GcmStatistic,
};
pub use kernel::{gram_matrix, krr_diag, select_lambda, KernelDiag, KernelSpec};
pub use multi::{
    feature_lift_apply, gcm_matrix, mc_quantile, multi_gcm_test, residual_correlation,
    FeatureLift, LiftMap, MultiGcmResult,
};
pub use nfl::{
    embed_digits, extract_digits, f_a, hide, nfl_null_model, recover, rkhs_norm_sq,
    sample_hidden_null, HiddenSample, HidingSpec, RkhsNormSq,
};
pub use regression::{Backend, LambdaRule, RegressionFit};
pub use sim::{
    acceptance_band, gen_model, rejection_rate, truth_diagnostics, ModelName, ModelSpec,
    RejectionReport, TestConfig, TestKind,
};
