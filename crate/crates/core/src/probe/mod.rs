//! Reliability probes on hidden states, selected by token uncertainty.

mod logistic;
mod metrics;
mod selection;
mod sweep;

pub use logistic::{
    fit_logistic, fit_probe, stratified_split, train_probe, train_test_split, FeatureMatrix, LinearProbe, LogisticFit,
    LogisticObjective, Split, Standardizer, TrainHyper, TrainMeta, TrainedProbe, DEFAULT_L2, DEFAULT_MAX_ITER,
    DEFAULT_TOL, MIN_SAMPLES, MIN_STD,
};
pub use metrics::auroc;
pub use selection::{build_feature, select_indices, select_tokens, AvgSubset, TokenSelection, MAX_RANK};
pub use sweep::{
    baseline_rows, layer_sweep, score_p_true, EvalReport, EvalRow, ProbeDataset, ProbeModel, ProbeSample,
    SweepConfig, SweepOutcome, SweepSelection,
};
