//! Experiment orchestration from a JSON manifest, synthetic datasets and
//! result emission.
//!
//! A run writes into `<output_dir>/experiment-<task name>/`:
//!
//! ```text
//! manifest_resolved.json   manifest with defaults filled in, input hashes
//! splits.tsv               split, n_train, n_test, train_ids, test_ids
//! metrics_per_split.tsv    one row per outer split
//! subject_predictions.tsv  participant_id, split, true_label, predicted_label, score
//! summary.tsv              metric, mean, sd, n_splits
//! weights.nii.gz           averaged linear model painted on the grid
//! report.txt               human-readable summary and warnings
//! ```
//!
//! Floating-point TSV fields are written with 17 significant digits.

mod emit;
mod manifest;
mod results;
mod run;
mod svg;
mod synthetic;

use std::path::PathBuf;

pub use emit::{
    emit_reports, emit_weight_volume, format_number, METRICS_HEADER, PREDICTIONS_HEADER, SPLITS_HEADER,
    SUMMARY_HEADER,
};
pub use manifest::{ClassifierSpec, FeatureSpec, FeatureType, Manifest, ValidationSpec};
pub use results::{read_results, ResultsTable};
pub use run::{run_experiment, ExperimentError, ExperimentOutput, RunOptions, Stage, RESOLVED_MANIFEST};
pub use svg::{box_stats, emit_boxplot_svg, quantile_linear, BoxStats};
pub use synthetic::{generate_synthetic_dataset, SyntheticDataset, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("weight volume does not match the model: {0}")]
    DescriptorMismatch(String),
    #[error("empty distribution: {0}")]
    EmptyDistribution(String),
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("{path}: malformed results file: {detail}")]
    MalformedResults { path: PathBuf, detail: String },
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}
