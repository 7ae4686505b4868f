//! Training, evaluation metrics and statistical comparison.

pub mod cv;
pub mod evaluate;
pub mod metrics;
pub mod stats;
pub mod trainer;

pub use cv::{
    assemble_fold, encode_variant, fold_norm, prepare_fold, run_cv, run_cv_fixed, standard_stats,
    with_jobs, CvRun, PreparedFold, Variant,
};
pub use evaluate::{
    breakdown, evaluate, Aggregate, EvalReport, EvalRow, MetricSet, Prediction, Subset,
    METRIC_ORDER,
};
pub use metrics::{accuracy, bca, macro_f1, mauc, sensitivity, specificity, ConfusionMatrix, Mauc};
pub use stats::{linreg_slope, mann_whitney_u, welch_t_test, MannWhitney, WelchResult};
pub use trainer::{bca_on, train_model, EpochLog, GridSpec, TrainConfig, TrainLog};
