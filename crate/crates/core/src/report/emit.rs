use std::fs;
use std::path::Path;

use crate::classifiers::LinearModel;
use crate::evaluation::{ExperimentResult, Metric};
use crate::features::{FeatureDescriptor, RegionList};
use crate::volume::{write_volume, LabelVolume, Volume3D};

use super::{io_err, ReportError, Result};

pub const SPLITS_HEADER: [&str; 5] = ["split", "n_train", "n_test", "train_ids", "test_ids"];
pub const METRICS_HEADER: [&str; 12] = [
    "split",
    "balanced_accuracy",
    "auc",
    "accuracy",
    "sensitivity",
    "specificity",
    "tp",
    "fn",
    "tn",
    "fp",
    "hyperparameters",
    "non_converged_fits",
];
pub const PREDICTIONS_HEADER: [&str; 5] = ["participant_id", "split", "true_label", "predicted_label", "score"];
pub const SUMMARY_HEADER: [&str; 4] = ["metric", "mean", "sd", "n_splits"];

/// Scientific notation with 17 significant digits, so every f64 survives a
/// text roundtrip.
pub fn format_number(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_tsv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes splits.tsv, metrics_per_split.tsv, subject_predictions.tsv and
/// summary.tsv into `out_dir`.
pub fn emit_reports(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    let ids = &result.subject_ids;
    let join = |rows: &[usize]| rows.iter().map(|&i| ids[i].as_str()).collect::<Vec<_>>().join(",");

    write_tsv(
        &out_dir.join("splits.tsv"),
        &SPLITS_HEADER,
        result.splits.iter().map(|s| {
            vec![s.index.to_string(), s.train.len().to_string(), s.test.len().to_string(), join(&s.train), join(&s.test)]
        }),
    )?;

    write_tsv(
        &out_dir.join("metrics_per_split.tsv"),
        &METRICS_HEADER,
        result.splits.iter().map(|s| {
            let m = &s.metrics;
            let mut row = vec![s.index.to_string()];
            row.extend(Metric::ALL.iter().map(|metric| format_number(metric.of(m))));
            row.extend([m.tp, m.fn_, m.tn, m.fp].iter().map(ToString::to_string));
            row.push(s.hyperparameter_label());
            row.push(s.non_converged_fits.to_string());
            row
        }),
    )?;

    write_tsv(
        &out_dir.join("subject_predictions.tsv"),
        &PREDICTIONS_HEADER,
        result.predictions.iter().map(|p| {
            vec![
                ids[p.subject].clone(),
                p.split.to_string(),
                p.true_label.to_string(),
                p.predicted.to_string(),
                format_number(p.score),
            ]
        }),
    )?;

    write_tsv(
        &out_dir.join("summary.tsv"),
        &SUMMARY_HEADER,
        result.summary.metrics.iter().map(|(metric, s)| {
            vec![metric.name().to_string(), format_number(s.mean), format_number(s.sd), result.summary.n_splits.to_string()]
        }),
    )
}

/// Paints model weights onto the feature grid: each masked voxel gets its
/// weight, or every voxel of a region gets the region's weight. Everything
/// else is 0. Regional descriptors need the atlas they were built from.
pub fn emit_weight_volume(
    model: &LinearModel,
    descriptor: &FeatureDescriptor,
    atlas: Option<&LabelVolume>,
    out_path: &Path,
) -> Result<Volume3D> {
    if model.n_features() != descriptor.len() {
        return Err(ReportError::DescriptorMismatch(format!(
            "model has {} weights, descriptor {} features",
            model.n_features(),
            descriptor.len()
        )));
    }
    let grid = descriptor.grid().clone();
    let mut data = vec![0.0; grid.n_voxels()];
    match descriptor {
        FeatureDescriptor::Voxels(map) => {
            for (&i, &w) in map.indices().iter().zip(&model.weights) {
                data[i] = w;
            }
        }
        FeatureDescriptor::Regions(list) => {
            let atlas = atlas.ok_or_else(|| ReportError::DescriptorMismatch("regional weights need the atlas".into()))?;
            let rebuilt = RegionList::from_atlas(atlas, Some(list.ids()))
                .map_err(|e| ReportError::DescriptorMismatch(e.to_string()))?;
            if FeatureDescriptor::Regions(rebuilt).content_hash() != descriptor.content_hash() {
                return Err(ReportError::DescriptorMismatch("atlas differs from the one the features came from".into()));
            }
            for (k, &id) in list.ids().iter().enumerate() {
                for (v, &label) in data.iter_mut().zip(atlas.labels()) {
                    if label == id {
                        *v = model.weights[k];
                    }
                }
            }
        }
    }
    let volume = Volume3D::new(grid, data)?;
    write_volume(&volume, out_path)?;
    Ok(volume)
}
