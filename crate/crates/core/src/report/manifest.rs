use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifiers::{Hyperparameters, MaxFeatures, ModelKind};
use crate::dataset::{Modality, TaskSpec};
use crate::evaluation::{default_grid, CvConfig, OuterStrategy, SelectionMode, SplitStrategy};

/// One experiment. Relative paths are resolved against the directory that
/// holds the manifest file; unknown keys are rejected.
///
/// ```json
/// {
///   "dataset_root": "data",
///   "task": {"name": "CN_vs_AD", "group_a": {"label": "CN"}, "group_b": {"label": "AD"}},
///   "modality": "T1w",
///   "features": {"type": "voxel", "mask_path": "mask.nii.gz", "fwhm_mm": 4},
///   "classifier": {"kind": "svm", "c_values": [0.01, 1]},
///   "validation": {"strategy": "repeated_shuffle", "n_iterations": 250, "test_fraction": 0.3},
///   "output_dir": "results"
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_root: PathBuf,
    pub task: TaskSpec,
    pub modality: Modality,
    pub features: FeatureSpec,
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub balance_classes: bool,
    pub output_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    Voxel,
    Regional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    #[serde(rename = "type")]
    pub kind: FeatureType,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub atlas_path: Option<PathBuf>,
    /// Regions to keep (all nonzero atlas labels when absent).
    #[serde(default)]
    pub region_ids: Option<Vec<u32>>,
    #[serde(default)]
    pub fwhm_mm: f64,
    #[serde(default)]
    pub suvr_reference_mask_path: Option<PathBuf>,
    #[serde(default)]
    pub standardize: bool,
}

/// Grid overrides; anything left out falls back to the default grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub c_values: Option<Vec<f64>>,
    #[serde(default)]
    pub n_trees: Option<Vec<usize>>,
    #[serde(default)]
    pub max_features: Option<Vec<MaxFeatures>>,
}

impl ClassifierSpec {
    pub fn grid(&self, n_features: usize) -> Vec<Hyperparameters> {
        let defaults = default_grid(self.kind, n_features);
        match self.kind {
            ModelKind::Svm | ModelKind::LogReg => match &self.c_values {
                None => defaults,
                Some(cs) => cs
                    .iter()
                    .map(|&c| match self.kind {
                        ModelKind::Svm => Hyperparameters::Svm { c },
                        _ => Hyperparameters::LogReg { c },
                    })
                    .collect(),
            },
            ModelKind::Forest => {
                let mut default_trees = Vec::new();
                let mut default_mf = Vec::new();
                for hp in &defaults {
                    if let Hyperparameters::Forest { n_trees, max_features } = *hp {
                        if !default_trees.contains(&n_trees) {
                            default_trees.push(n_trees);
                        }
                        if !default_mf.contains(&max_features) {
                            default_mf.push(max_features);
                        }
                    }
                }
                let trees = self.n_trees.clone().unwrap_or(default_trees);
                let mf = self.max_features.clone().unwrap_or(default_mf);
                trees
                    .iter()
                    .flat_map(|&n_trees| mf.iter().map(move |&max_features| Hyperparameters::Forest { n_trees, max_features }))
                    .collect()
            }
        }
    }
}

fn default_strategy() -> SplitStrategy {
    SplitStrategy::RepeatedShuffle
}

fn default_inner_k() -> usize {
    10
}

/// Outer strategy parameters sit next to `strategy`; `k` (and `n_repeats`)
/// are required for the k-fold strategies, shuffle splits default to 250
/// iterations at a 0.3 test fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    #[serde(default = "default_strategy")]
    pub strategy: SplitStrategy,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub n_repeats: Option<usize>,
    #[serde(default)]
    pub n_iterations: Option<usize>,
    #[serde(default)]
    pub test_fraction: Option<f64>,
    #[serde(default = "default_inner_k")]
    pub inner_k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub selection: SelectionMode,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            strategy: default_strategy(),
            k: None,
            n_repeats: None,
            n_iterations: None,
            test_fraction: None,
            inner_k: default_inner_k(),
            seed: 0,
            selection: SelectionMode::default(),
        }
    }
}

impl ValidationSpec {
    pub fn outer(&self) -> Result<OuterStrategy, String> {
        let unused = |name: &str, set: bool| {
            if set {
                Err(format!("validation.{name} does not apply to strategy {}", self.strategy))
            } else {
                Ok(())
            }
        };
        let required = |name: &str, v: Option<usize>| v.ok_or(format!("strategy {} needs validation.{name}", self.strategy));
        match self.strategy {
            SplitStrategy::Kfold => {
                unused("n_repeats", self.n_repeats.is_some())?;
                unused("n_iterations", self.n_iterations.is_some())?;
                unused("test_fraction", self.test_fraction.is_some())?;
                Ok(OuterStrategy::Kfold { k: required("k", self.k)? })
            }
            SplitStrategy::RepeatedKfold => {
                unused("n_iterations", self.n_iterations.is_some())?;
                unused("test_fraction", self.test_fraction.is_some())?;
                Ok(OuterStrategy::RepeatedKfold { k: required("k", self.k)?, n_repeats: required("n_repeats", self.n_repeats)? })
            }
            SplitStrategy::RepeatedShuffle => {
                unused("k", self.k.is_some())?;
                unused("n_repeats", self.n_repeats.is_some())?;
                let OuterStrategy::RepeatedShuffle { n_iterations, test_fraction } = OuterStrategy::default() else {
                    unreachable!()
                };
                Ok(OuterStrategy::RepeatedShuffle {
                    n_iterations: self.n_iterations.unwrap_or(n_iterations),
                    test_fraction: self.test_fraction.unwrap_or(test_fraction),
                })
            }
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Manifest {
    /// Parses and validates without touching the file system; relative
    /// paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Manifest, String> {
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        resolve(base_dir, &mut m.dataset_root);
        resolve(base_dir, &mut m.output_dir);
        for p in [&mut m.features.mask_path, &mut m.features.atlas_path, &mut m.features.suvr_reference_mask_path]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, p);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.task.validate().map_err(|e| e.to_string())?;
        let f = &self.features;
        match (f.kind, &f.mask_path, &f.atlas_path) {
            (_, Some(_), Some(_)) => return Err("features: set exactly one of mask_path and atlas_path".into()),
            (FeatureType::Voxel, None, _) => return Err("features: type voxel needs mask_path".into()),
            (FeatureType::Regional, _, None) => return Err("features: type regional needs atlas_path".into()),
            _ => {}
        }
        if let Some(ids) = &f.region_ids {
            if f.kind != FeatureType::Regional {
                return Err("features: region_ids only applies to type regional".into());
            }
            if ids.is_empty() || ids.contains(&0) {
                return Err("features: region_ids must be nonempty and exclude 0".into());
            }
        }
        if !(f.fwhm_mm.is_finite() && f.fwhm_mm >= 0.0) {
            return Err(format!("features: fwhm_mm must be finite and >= 0, got {}", f.fwhm_mm));
        }
        if f.suvr_reference_mask_path.is_some() && self.modality != Modality::FdgPet {
            return Err("features: suvr_reference_mask_path requires modality FDG-PET".into());
        }
        let c = &self.classifier;
        let linear = matches!(c.kind, ModelKind::Svm | ModelKind::LogReg);
        if linear && (c.n_trees.is_some() || c.max_features.is_some()) {
            return Err(format!("classifier: n_trees and max_features do not apply to {}", c.kind));
        }
        if !linear && c.c_values.is_some() {
            return Err("classifier: c_values does not apply to forest".into());
        }
        for list_len in [c.c_values.as_ref().map(Vec::len), c.n_trees.as_ref().map(Vec::len), c.max_features.as_ref().map(Vec::len)]
            .into_iter()
            .flatten()
        {
            if list_len == 0 {
                return Err("classifier: grid override lists must be nonempty".into());
            }
        }
        for hp in c.grid(1) {
            hp.validate().map_err(|e| format!("classifier: {e}"))?;
        }
        self.cv_config(1)?.validate(c.kind).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Validation settings with the hyperparameter grid resolved for
    /// `n_features` columns.
    pub fn cv_config(&self, n_features: usize) -> Result<CvConfig, String> {
        let v = &self.validation;
        Ok(CvConfig {
            outer: v.outer()?,
            inner_k: v.inner_k,
            grid: self.classifier.grid(n_features),
            master_seed: v.seed,
            selection: v.selection,
            standardize: self.features.standardize,
        })
    }

    /// `<output_dir>/experiment-<task name>`
    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(format!("experiment-{}", self.task.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "dataset_root": "data",
        "task": {"name": "CN_vs_AD", "group_a": {"label": "CN"}, "group_b": {"label": "AD"}},
        "modality": "T1w",
        "features": {"type": "voxel", "mask_path": "mask.nii.gz"},
        "classifier": {"kind": "svm"},
        "output_dir": "out"
    }"#;

    fn with(edit: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        edit(&mut v);
        v.to_string()
    }

    #[test]
    fn defaults_and_path_resolution() {
        let m = Manifest::parse(BASE, Path::new("/exp")).unwrap();
        assert_eq!(m.dataset_root, Path::new("/exp/data"));
        assert_eq!(m.features.mask_path.as_deref(), Some(Path::new("/exp/mask.nii.gz")));
        assert_eq!(m.experiment_dir(), Path::new("/exp/out/experiment-CN_vs_AD"));
        let cv = m.cv_config(10).unwrap();
        assert_eq!(cv.outer, OuterStrategy::RepeatedShuffle { n_iterations: 250, test_fraction: 0.3 });
        assert_eq!(cv.inner_k, 10);
        assert_eq!(cv.grid.len(), 9);
        assert!(!m.balance_classes);
    }

    #[test]
    fn rejects_contract_violations() {
        let bad = [
            with(|v| v["features"]["atlas_path"] = "atlas.nii.gz".into()),
            with(|v| {
                v["features"]["type"] = "voxel".into();
                v["features"].as_object_mut().unwrap().remove("mask_path");
                v["features"]["atlas_path"] = "atlas.nii.gz".into();
            }),
            with(|v| v["features"]["type"] = "regional".into()),
            with(|v| v["extra"] = 1.into()),
            with(|v| v["classifier"]["n_trees"] = serde_json::json!([10])),
            with(|v| v["classifier"]["c_values"] = serde_json::json!([-1.0])),
            with(|v| v["features"]["suvr_reference_mask_path"] = "pons.nii.gz".into()),
            with(|v| v["features"]["fwhm_mm"] = (-1.0).into()),
            with(|v| v["validation"] = serde_json::json!({"strategy": "kfold"})),
            with(|v| v["validation"] = serde_json::json!({"strategy": "kfold", "k": 5, "test_fraction": 0.2})),
            with(|v| v["validation"] = serde_json::json!({"inner_k": 1})),
            with(|v| v["task"]["name"] = "bad name".into()),
        ];
        for text in bad {
            assert!(Manifest::parse(&text, Path::new("/")).is_err(), "accepted {text}");
        }
    }

    #[test]
    fn forest_overrides_fill_missing_axis() {
        let text = with(|v| v["classifier"] = serde_json::json!({"kind": "forest", "n_trees": [10, 20]}));
        let m = Manifest::parse(&text, Path::new("/")).unwrap();
        let grid = m.classifier.grid(16);
        assert_eq!(grid.len(), 2 * 3);
        assert_eq!(grid[0], Hyperparameters::Forest { n_trees: 10, max_features: MaxFeatures::Count(4) });
        let text = with(|v| v["classifier"] = serde_json::json!({"kind": "logreg", "c_values": [0.5]}));
        let m = Manifest::parse(&text, Path::new("/")).unwrap();
        assert_eq!(m.classifier.grid(3), vec![Hyperparameters::LogReg { c: 0.5 }]);
    }

    #[test]
    fn kfold_strategies() {
        let text = with(|v| v["validation"] = serde_json::json!({"strategy": "repeated_kfold", "k": 5, "n_repeats": 3, "seed": 7}));
        let m = Manifest::parse(&text, Path::new("/")).unwrap();
        let cv = m.cv_config(4).unwrap();
        assert_eq!(cv.outer, OuterStrategy::RepeatedKfold { k: 5, n_repeats: 3 });
        assert_eq!(cv.master_seed, 7);
    }
}
