//! Split planning, nested cross-validation, metrics, learning curves and
//! cross-dataset evaluation.

mod metrics;
mod nested;
mod splits;

pub use metrics::{auc, compute_metrics, mean_sd, Metric, MetricSummary, MetricsRecord, Summary};
pub use nested::{
    cross_dataset_eval, default_grid, learning_curve, nested_cv, nested_cv_observed, CrossDatasetResult, CvConfig,
    ExperimentResult, Inputs, LearningCurve, LearningCurvePoint, OuterModel, OuterStrategy, SelectionMode,
    SplitOutcome, SubjectPrediction, TrainingObserver,
};
pub use splits::{
    balance_classes, repeated_stratified_kfold, stratified_kfold, stratified_shuffle_split, stratified_shuffle_splits,
    stratified_test_counts, Split, SplitPlan, SplitStrategy,
};

use crate::classifiers::ClassifierError;
use crate::features::FeatureError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvaluationError {
    #[error("k = {k} folds needs at least k members per class; smallest class has {minority}")]
    KTooLarge { k: usize, minority: usize },
    #[error("test fraction {fraction} leaves a class of {class_size} entirely in train or test")]
    DegenerateFraction { fraction: f64, class_size: usize },
    #[error("invalid validation config: {0}")]
    InvalidConfig(String),
    #[error("outer split {split}: training set cannot support {inner_k} stratified inner folds")]
    InnerFoldDegenerate { split: usize, inner_k: usize },
    #[error("ground truth contains a single class")]
    SingleClassTruth,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("feature descriptors differ: {0}")]
    DescriptorMismatch(String),
    #[error("{0} requires feature rows, only a Gram matrix was given")]
    MissingFeatures(&'static str),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("features: {0}")]
    Features(String),
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

impl From<FeatureError> for EvaluationError {
    fn from(e: FeatureError) -> Self {
        EvaluationError::Features(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, EvaluationError>;

/// Runs `f` on a dedicated pool of `workers` threads (all cores when
/// `None`). Results never depend on the worker count.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| EvaluationError::WorkerPool(e.to_string()))?;
    Ok(pool.install(f))
}
