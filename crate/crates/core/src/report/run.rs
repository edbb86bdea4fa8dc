use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::classifiers::ModelKind;
use crate::dataset::{load_dataset, select_cohort, CohortTable};
use crate::evaluation::{balance_classes, nested_cv, with_workers, CvConfig, ExperimentResult, Inputs, Metric};
use crate::features::{
    compute_gram, extract_regional_features, extract_voxel_features, read_gram_cache, write_gram_cache, FeatureMatrix,
    Preprocessing, RegionList,
};
use crate::hash::{file_sha256, sha256_hex};
use crate::volume::{read_labels, read_mask, BinaryMask, LabelVolume};

use super::emit::{emit_reports, emit_weight_volume};
use super::manifest::{FeatureType, Manifest};

pub const RESOLVED_MANIFEST: &str = "manifest_resolved.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    OutputSetup,
    LoadDataset,
    SelectCohort,
    BalanceClasses,
    ResolveInputs,
    FeatureExtraction,
    Gram,
    NestedCv,
    Reports,
    WeightVolume,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::OutputSetup => "output_setup",
            Stage::LoadDataset => "load_dataset",
            Stage::SelectCohort => "select_cohort",
            Stage::BalanceClasses => "balance_classes",
            Stage::ResolveInputs => "resolve_inputs",
            Stage::FeatureExtraction => "feature_extraction",
            Stage::Gram => "gram",
            Stage::NestedCv => "nested_cv",
            Stage::Reports => "reports",
            Stage::WeightVolume => "weight_volume",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid manifest {path}: {detail}")]
    InvalidManifest { path: PathBuf, detail: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl ExperimentError {
    /// True for problems found before any computation started.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::InvalidManifest { .. })
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            ExperimentError::Stage { stage, .. } => Some(*stage),
            ExperimentError::InvalidManifest { .. } => None,
        }
    }
}

fn at<E: Into<Box<dyn std::error::Error + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, source: e.into() }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; all cores when `None`. Never changes results.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub result: ExperimentResult,
    pub n_features: usize,
}

/// Runs the experiment described by the manifest at `manifest_path`.
///
/// Outputs are assembled in a hidden sibling directory and moved to
/// `<output_dir>/experiment-<name>` only on success, replacing any earlier
/// run; on failure nothing is left behind.
pub fn run_experiment(manifest_path: &Path, options: &RunOptions) -> Result<ExperimentOutput, ExperimentError> {
    let invalid = |detail: String| ExperimentError::InvalidManifest { path: manifest_path.to_path_buf(), detail };
    let manifest_path = std::path::absolute(manifest_path).map_err(|e| invalid(e.to_string()))?;
    let bytes = fs::read(&manifest_path).map_err(|e| invalid(e.to_string()))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| invalid(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("/"));
    let manifest = Manifest::parse(&text, base).map_err(&invalid)?;
    if !manifest.dataset_root.is_dir() {
        return Err(invalid(format!("dataset_root {} is not a directory", manifest.dataset_root.display())));
    }
    let f = &manifest.features;
    for p in [&f.mask_path, &f.atlas_path, &f.suvr_reference_mask_path].into_iter().flatten() {
        if !p.is_file() {
            return Err(invalid(format!("{} does not exist", p.display())));
        }
    }

    let final_dir = manifest.experiment_dir();
    let staging = manifest.output_dir.join(format!(".experiment-{}.partial", manifest.task.name));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(at(Stage::OutputSetup))?;
    }
    fs::create_dir_all(&staging).map_err(at(Stage::OutputSetup))?;

    let run = Run { manifest: &manifest, manifest_path: &manifest_path, manifest_sha256: sha256_hex(&bytes), dir: &staging };
    let outcome = with_workers(options.workers, || run.execute()).map_err(at(Stage::OutputSetup)).and_then(|r| r);
    let (result, n_features) = match outcome {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let finish = || -> std::io::Result<()> {
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&staging, &final_dir)
    };
    if let Err(e) = finish() {
        let _ = fs::remove_dir_all(&staging);
        return Err(at(Stage::OutputSetup)(e));
    }
    Ok(ExperimentOutput { dir: final_dir, result, n_features })
}

struct Run<'a> {
    manifest: &'a Manifest,
    manifest_path: &'a Path,
    manifest_sha256: String,
    dir: &'a Path,
}

enum Space {
    Voxels(BinaryMask),
    Regions { atlas: LabelVolume, list: RegionList },
}

impl Run<'_> {
    fn execute(&self) -> Result<(ExperimentResult, usize), ExperimentError> {
        let m = self.manifest;
        let index = load_dataset(&m.dataset_root).map_err(at(Stage::LoadDataset))?;
        let mut cohort = select_cohort(&index, &m.task, &[m.modality]).map_err(at(Stage::SelectCohort))?;
        if m.balance_classes {
            let keep = balance_classes(&cohort.labels(), m.validation.seed);
            cohort = cohort.subset(&keep).map_err(at(Stage::BalanceClasses))?;
        }
        let ids = cohort.participant_ids();
        let images: Vec<PathBuf> = ids
            .iter()
            .map(|id| index.baseline_image(id, m.modality).expect("cohort members have the image").to_path_buf())
            .collect();

        let f = &m.features;
        let space = match f.kind {
            FeatureType::Voxel => Space::Voxels(read_mask(f.mask_path.as_ref().unwrap()).map_err(at(Stage::ResolveInputs))?),
            FeatureType::Regional => {
                let atlas = read_labels(f.atlas_path.as_ref().unwrap()).map_err(at(Stage::ResolveInputs))?;
                let list = RegionList::from_atlas(&atlas, f.region_ids.as_deref()).map_err(at(Stage::ResolveInputs))?;
                Space::Regions { atlas, list }
            }
        };
        let n_features = match &space {
            Space::Voxels(mask) => mask.count(),
            Space::Regions { list, .. } => list.ids().len(),
        };
        let cv = m.cv_config(n_features).map_err(at(Stage::ResolveInputs))?;
        self.write_resolved(&index.root().join("participants.tsv"), &cohort, &images, &cv, n_features)?;

        let suvr_reference = match &f.suvr_reference_mask_path {
            Some(p) => Some(read_mask(p).map_err(at(Stage::FeatureExtraction))?),
            None => None,
        };
        let pre = Preprocessing { fwhm_mm: f.fwhm_mm, suvr_reference };
        let features = match &space {
            Space::Voxels(mask) => extract_voxel_features(ids, &images, mask, &pre),
            Space::Regions { atlas, list } => extract_regional_features(ids, &images, atlas, Some(list.ids()), &pre),
        }
        .map_err(at(Stage::FeatureExtraction))?;

        let labels = cohort.labels();
        let kind = m.classifier.kind;
        let result = if kind == ModelKind::Svm {
            let gram = self.gram(&features)?;
            nested_cv(Inputs::Both { features: &features, gram: &gram }, &labels, kind, &cv)
        } else {
            nested_cv(Inputs::Features(&features), &labels, kind, &cv)
        }
        .map_err(at(Stage::NestedCv))?;

        emit_reports(&result, self.dir).map_err(at(Stage::Reports))?;
        if let Some(model) = &result.averaged_model {
            let atlas = match &space {
                Space::Regions { atlas, .. } => Some(atlas),
                Space::Voxels(_) => None,
            };
            emit_weight_volume(model, features.descriptor(), atlas, &self.dir.join("weights.nii.gz"))
                .map_err(at(Stage::WeightVolume))?;
        }
        let report = text_report(m, &result, &cohort, n_features);
        let path = self.dir.join("report.txt");
        fs::write(&path, report).map_err(at(Stage::Reports))?;
        Ok((result, n_features))
    }

    /// Linear-kernel matrix, reused across runs through a content-addressed
    /// cache under `<output_dir>/.cache`.
    fn gram(&self, features: &FeatureMatrix) -> Result<crate::GramMatrix, ExperimentError> {
        let hash = features.content_hash();
        let cache_dir = self.manifest.output_dir.join(".cache");
        let path = cache_dir.join(format!("gram-{}.bin", hex::encode(hash)));
        if let Some(g) = read_gram_cache(&path, &hash).map_err(at(Stage::Gram))? {
            return Ok(g);
        }
        let gram = compute_gram(features);
        fs::create_dir_all(&cache_dir).map_err(at(Stage::Gram))?;
        write_gram_cache(&path, &gram, &hash).map_err(at(Stage::Gram))?;
        Ok(gram)
    }

    fn write_resolved(
        &self,
        participants_tsv: &Path,
        cohort: &CohortTable,
        images: &[PathBuf],
        cv: &CvConfig,
        n_features: usize,
    ) -> Result<(), ExperimentError> {
        let m = self.manifest;
        let mut inputs: Vec<PathBuf> = vec![participants_tsv.to_path_buf()];
        for id in cohort.participant_ids() {
            inputs.push(m.dataset_root.join(&id).join(format!("{id}_sessions.tsv")));
        }
        inputs.extend(images.iter().cloned());
        let f = &m.features;
        inputs.extend([&f.mask_path, &f.atlas_path, &f.suvr_reference_mask_path].into_iter().flatten().cloned());
        let mut hashes = BTreeMap::new();
        hashes.insert(self.manifest_path.display().to_string(), self.manifest_sha256.clone());
        for p in inputs {
            let h = file_sha256(&p).map_err(at(Stage::ResolveInputs))?;
            hashes.insert(p.display().to_string(), h);
        }
        let doc = json!({
            "tool": concat!("adml ", env!("CARGO_PKG_VERSION")),
            "manifest_path": self.manifest_path,
            "dataset_root": m.dataset_root,
            "task": m.task,
            "modality": m.modality,
            "features": m.features,
            "n_features": n_features,
            "classifier": { "kind": m.classifier.kind, "grid": cv.grid },
            "validation": {
                "outer": cv.outer,
                "inner_k": cv.inner_k,
                "seed": cv.master_seed,
                "selection": cv.selection,
                "standardize": cv.standardize,
            },
            "balance_classes": m.balance_classes,
            "output_dir": m.output_dir,
            "experiment_dir": m.experiment_dir(),
            "cohort": cohort.entries(),
            "input_sha256": hashes,
        });
        let path = self.dir.join(RESOLVED_MANIFEST);
        let mut text = serde_json::to_string_pretty(&doc).map_err(at(Stage::ResolveInputs))?;
        text.push('\n');
        fs::write(&path, text).map_err(at(Stage::ResolveInputs))
    }
}

fn text_report(m: &Manifest, result: &ExperimentResult, cohort: &CohortTable, n_features: usize) -> String {
    let (a, b) = cohort.class_counts();
    let feature_kind = match m.features.kind {
        FeatureType::Voxel => "voxel",
        FeatureType::Regional => "regional",
    };
    let mut out = format!(
        "experiment {}\nmodality {}, {feature_kind} features ({n_features}), classifier {}\n\
         subjects: {a} in group_a (label -1), {b} in group_b (label +1)\n\
         outer validation: {} with {} splits, inner {}-fold selection ({:?})\n\n",
        m.task.name,
        m.modality,
        result.kind,
        result.strategy(),
        result.summary.n_splits,
        m.validation.inner_k,
        m.validation.selection,
    );
    out.push_str(&format!("{:<20}{:>10}{:>10}\n", "metric", "mean", "sd"));
    for metric in Metric::ALL {
        let s = result.summary.get(metric);
        out.push_str(&format!("{:<20}{:>10.4}{:>10.4}\n", metric.name(), s.mean, s.sd));
    }
    out.push_str(
        "\nThe SD is the spread of the per-split estimates. Training sets of different splits overlap, \
         so it underestimates the uncertainty of the mean.\n",
    );
    let non_converged = result.non_converged_fits();
    if non_converged > 0 {
        out.push_str(&format!(
            "\nwarning: {non_converged} model fits stopped at the iteration limit before converging\n"
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{generate_synthetic_dataset, SyntheticSpec};

    fn setup(root: &Path, features: serde_json::Value, classifier: serde_json::Value) -> PathBuf {
        let spec = SyntheticSpec { n_per_class: [12, 12], dims: [4, 4, 3], n_informative: 6, effect_norm: 4.0, seed: 5 };
        generate_synthetic_dataset(&spec, &root.join("data")).unwrap();
        let manifest = json!({
            "dataset_root": "data",
            "task": {"name": "CN_vs_AD", "group_a": {"label": "CN"}, "group_b": {"label": "AD"}},
            "modality": "T1w",
            "features": features,
            "classifier": classifier,
            "validation": {"n_iterations": 6, "inner_k": 3, "seed": 2},
            "output_dir": "out"
        });
        let path = root.join("manifest.json");
        fs::write(&path, manifest.to_string()).unwrap();
        path
    }

    fn voxel() -> serde_json::Value {
        json!({"type": "voxel", "mask_path": "data/derivatives/synthetic/mask_informative.nii.gz"})
    }

    #[test]
    fn svm_voxel_run_writes_contract_files() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = setup(dir.path(), voxel(), json!({"kind": "svm", "c_values": [0.01, 1.0]}));
        let out = run_experiment(&manifest, &RunOptions { workers: Some(2) }).unwrap();
        assert_eq!(out.dir, dir.path().join("out/experiment-CN_vs_AD"));
        for name in [
            "splits.tsv",
            "metrics_per_split.tsv",
            "subject_predictions.tsv",
            "summary.tsv",
            "weights.nii.gz",
            RESOLVED_MANIFEST,
            "report.txt",
        ] {
            assert!(out.dir.join(name).is_file(), "missing {name}");
        }
        assert!(!dir.path().join("out/.experiment-CN_vs_AD.partial").exists());
        let resolved: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.dir.join(RESOLVED_MANIFEST)).unwrap()).unwrap();
        let hashes = resolved["input_sha256"].as_object().unwrap();
        // manifest + participants + 24 sessions + 24 images + mask
        assert_eq!(hashes.len(), 1 + 1 + 24 + 24 + 1);
        assert_eq!(resolved["validation"]["outer"]["test_fraction"], 0.3);

        let first: Vec<Vec<u8>> = ["metrics_per_split.tsv", "subject_predictions.tsv", "summary.tsv", "weights.nii.gz"]
            .iter()
            .map(|n| fs::read(out.dir.join(n)).unwrap())
            .collect();
        // Modify one image: its recorded hash must change, and the run
        // replaces the earlier output.
        let id = "sub-0001";
        let img = dir.path().join("data").join(id).join("ses-M00/anat").join(format!("{id}_ses-M00_T1w.nii.gz"));
        let before = hashes[&img.display().to_string()].clone();
        let again = run_experiment(&manifest, &RunOptions { workers: Some(1) }).unwrap();
        let second: Vec<Vec<u8>> = ["metrics_per_split.tsv", "subject_predictions.tsv", "summary.tsv", "weights.nii.gz"]
            .iter()
            .map(|n| fs::read(again.dir.join(n)).unwrap())
            .collect();
        assert_eq!(first, second);
        let spec = SyntheticSpec { n_per_class: [12, 12], dims: [4, 4, 3], n_informative: 6, effect_norm: 4.0, seed: 6 };
        let other = dir.path().join("other");
        generate_synthetic_dataset(&spec, &other).unwrap();
        fs::copy(other.join(id).join("ses-M00/anat").join(format!("{id}_ses-M00_T1w.nii.gz")), &img).unwrap();
        let third = run_experiment(&manifest, &RunOptions::default()).unwrap();
        let resolved: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(third.dir.join(RESOLVED_MANIFEST)).unwrap()).unwrap();
        assert_ne!(resolved["input_sha256"][img.display().to_string()].as_str().unwrap(), before);
    }

    #[test]
    fn regional_logreg_and_forest_runs() {
        let dir = tempfile::tempdir().unwrap();
        let regional = json!({"type": "regional", "atlas_path": "data/derivatives/synthetic/atlas.nii.gz", "standardize": true});
        let manifest = setup(dir.path(), regional.clone(), json!({"kind": "logreg", "c_values": [1.0]}));
        let out = run_experiment(&manifest, &RunOptions::default()).unwrap();
        assert_eq!(out.n_features, 9);
        assert!(out.dir.join("weights.nii.gz").is_file());

        let manifest = setup(dir.path(), regional, json!({"kind": "forest", "n_trees": [5], "max_features": ["sqrt"]}));
        let out = run_experiment(&manifest, &RunOptions::default()).unwrap();
        assert!(!out.dir.join("weights.nii.gz").exists());
        assert!(out.dir.join("summary.tsv").is_file());
    }

    #[test]
    fn validation_error_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let features = json!({"type": "voxel", "atlas_path": "data/derivatives/synthetic/atlas.nii.gz"});
        let manifest = setup(dir.path(), features, json!({"kind": "svm"}));
        let err = run_experiment(&manifest, &RunOptions::default()).unwrap_err();
        assert!(err.is_validation());
        assert!(!dir.path().join("out").exists());

        let missing = json!({"type": "voxel", "mask_path": "nowhere.nii.gz"});
        let manifest = setup(dir.path(), missing, json!({"kind": "svm"}));
        assert!(run_experiment(&manifest, &RunOptions::default()).unwrap_err().is_validation());
    }

    #[test]
    fn runtime_failure_names_stage_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = setup(dir.path(), voxel(), json!({"kind": "svm", "c_values": [1.0]}));
        // A mask on a different grid fails at extraction, after the
        // resolved manifest was written.
        let wrong = crate::volume::Volume3D::filled(crate::volume::Grid::new([2, 2, 2], [2.0; 3], [0.0; 3]).unwrap(), 1.0).unwrap();
        crate::volume::write_volume(&wrong, dir.path().join("data/derivatives/synthetic/mask_informative.nii.gz")).unwrap();
        let err = run_experiment(&manifest, &RunOptions::default()).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::FeatureExtraction));
        assert!(err.to_string().contains("feature_extraction"));
        let out = dir.path().join("out");
        assert_eq!(fs::read_dir(&out).unwrap().filter(|e| !e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".cache")).count(), 0);

        let manifest = setup(dir.path(), voxel(), json!({"kind": "svm"}));
        fs::remove_file(dir.path().join("data/sub-0003/sub-0003_sessions.tsv")).unwrap();
        assert_eq!(run_experiment(&manifest, &RunOptions::default()).unwrap_err().stage(), Some(Stage::LoadDataset));
    }
}
