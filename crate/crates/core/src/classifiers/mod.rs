//! Binary classifiers written from scratch: a dual soft-margin linear SVM
//! over a Gram matrix, L2 logistic regression and a random forest.

mod forest;
mod logreg;
mod svm;
mod text;

use serde::{Deserialize, Serialize};

use crate::label::Label;

pub use forest::{predict_forest, train_forest, ForestModel, ForestPrediction, Node, Tree};
pub use logreg::{
    logreg_gradient, logreg_objective, predict_logreg, train_logreg, train_logreg_with, LogRegModel,
    LogRegOptions, LogRegPrediction,
};
pub use svm::{
    predict_svm, reconstruct_weights, svm_dual_objective, train_svm_dual, train_svm_dual_with, SvmDualModel,
    SvmOptions,
};
pub use text::{parse_model, Model};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClassifierError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("Gram matrix is not positive semidefinite: {0}")]
    NonPsdGram(String),
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("max_features must be in 1..={p}, got {got}")]
    BadMaxFeatures { got: usize, p: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("cannot average an empty list of models")]
    EmptyList,
    #[error("model text: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

pub(crate) fn check_labels(labels: &[Label], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(ClassifierError::LengthMismatch { expected: n, actual: labels.len() });
    }
    let (neg, pos) = crate::label::class_counts(labels);
    if neg == 0 || pos == 0 {
        return Err(ClassifierError::SingleClass);
    }
    Ok(())
}

pub(crate) fn check_c(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(ClassifierError::InvalidHyperparameter(format!("C must be positive, got {c}")))
    }
}

/// Number of candidate features per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "MaxFeaturesRepr", into = "MaxFeaturesRepr")]
pub enum MaxFeatures {
    Count(usize),
    /// `ceil(sqrt(p))`
    Sqrt,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaxFeaturesRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<MaxFeaturesRepr> for MaxFeatures {
    type Error = String;

    fn try_from(r: MaxFeaturesRepr) -> std::result::Result<Self, String> {
        match r {
            MaxFeaturesRepr::Count(0) => Err("max_features must be at least 1".into()),
            MaxFeaturesRepr::Count(k) => Ok(MaxFeatures::Count(k)),
            MaxFeaturesRepr::Name(s) if s == "sqrt" => Ok(MaxFeatures::Sqrt),
            MaxFeaturesRepr::Name(s) => Err(format!("unknown max_features rule `{s}`")),
        }
    }
}

impl From<MaxFeatures> for MaxFeaturesRepr {
    fn from(m: MaxFeatures) -> Self {
        match m {
            MaxFeatures::Count(k) => MaxFeaturesRepr::Count(k),
            MaxFeatures::Sqrt => MaxFeaturesRepr::Name("sqrt".into()),
        }
    }
}

impl MaxFeatures {
    pub fn resolve(self, p: usize) -> Result<usize> {
        let k = match self {
            MaxFeatures::Count(k) => k,
            MaxFeatures::Sqrt => (p as f64).sqrt().ceil() as usize,
        };
        if k == 0 || k > p {
            return Err(ClassifierError::BadMaxFeatures { got: k, p });
        }
        Ok(k)
    }
}

impl std::fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaxFeatures::Count(k) => write!(f, "{k}"),
            MaxFeatures::Sqrt => f.write_str("sqrt"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Svm,
    LogReg,
    Forest,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Svm => "svm",
            ModelKind::LogReg => "logreg",
            ModelKind::Forest => "forest",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum Hyperparameters {
    Svm {
        #[serde(rename = "C")]
        c: f64,
    },
    LogReg {
        #[serde(rename = "C")]
        c: f64,
    },
    Forest { n_trees: usize, max_features: MaxFeatures },
}

impl Hyperparameters {
    pub fn kind(&self) -> ModelKind {
        match self {
            Hyperparameters::Svm { .. } => ModelKind::Svm,
            Hyperparameters::LogReg { .. } => ModelKind::LogReg,
            Hyperparameters::Forest { .. } => ModelKind::Forest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Hyperparameters::Svm { c } | Hyperparameters::LogReg { c } => check_c(c),
            Hyperparameters::Forest { n_trees, max_features } => {
                if n_trees == 0 {
                    return Err(ClassifierError::InvalidHyperparameter("n_trees must be at least 1".into()));
                }
                if max_features == MaxFeatures::Count(0) {
                    return Err(ClassifierError::InvalidHyperparameter("max_features must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

impl std::fmt::Display for Hyperparameters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Hyperparameters::Svm { c } | Hyperparameters::LogReg { c } => write!(f, "C={c}"),
            Hyperparameters::Forest { n_trees, max_features } => {
                write!(f, "n_trees={n_trees};max_features={max_features}")
            }
        }
    }
}

/// `score(x) = w . x + b`
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::NonFinite("linear model".into()));
        }
        Ok(LinearModel { weights, bias })
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(ClassifierError::DimensionMismatch(format!(
                "model has {} weights, input has {} features",
                self.weights.len(),
                x.len()
            )));
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        self.score(x).map(Label::from_score)
    }
}

/// Elementwise mean of weights and biases.
pub fn average_linear_models(models: &[LinearModel]) -> Result<LinearModel> {
    let first = models.first().ok_or(ClassifierError::EmptyList)?;
    let p = first.weights.len();
    if let Some(m) = models.iter().find(|m| m.weights.len() != p) {
        return Err(ClassifierError::DimensionMismatch(format!("{} vs {} weights", p, m.weights.len())));
    }
    let k = models.len() as f64;
    let mut weights = vec![0.0; p];
    let mut bias = 0.0;
    for m in models {
        for (acc, w) in weights.iter_mut().zip(&m.weights) {
            *acc += w;
        }
        bias += m.bias;
    }
    weights.iter_mut().for_each(|w| *w /= k);
    LinearModel::new(weights, bias / k)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
