use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{
    average_linear_models, predict_forest, reconstruct_weights, train_forest, train_logreg, train_svm_dual,
    ForestModel, Hyperparameters, LinearModel, MaxFeatures, ModelKind, SvmDualModel,
};
use crate::features::{compute_gram, FeatureMatrix, GramMatrix, Standardizer};
use crate::label::Label;
use crate::seed::{derive_seed, mix, rng_from, Stream};

use super::metrics::{balanced_accuracy, compute_metrics, mean_sd, MetricSummary, MetricsRecord, Summary};
use super::splits::{
    repeated_stratified_kfold, stratified_kfold, stratified_shuffle_splits, Split, SplitPlan, SplitStrategy,
};
use super::{EvaluationError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterStrategy {
    Kfold { k: usize },
    RepeatedKfold { k: usize, n_repeats: usize },
    RepeatedShuffle { n_iterations: usize, test_fraction: f64 },
}

impl Default for OuterStrategy {
    fn default() -> Self {
        OuterStrategy::RepeatedShuffle { n_iterations: 250, test_fraction: 0.3 }
    }
}

/// How the inner folds turn into one outer model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Best grid point per inner fold, then average those fold models.
    #[default]
    PerFoldAverage,
    /// Average inner scores per grid point, pick one, retrain on the outer
    /// training set.
    MeanScoreRetrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub outer: OuterStrategy,
    pub inner_k: usize,
    pub grid: Vec<Hyperparameters>,
    pub master_seed: u64,
    pub selection: SelectionMode,
    /// z-score features with statistics from each fit's training rows.
    /// Forests ignore it.
    pub standardize: bool,
}

impl CvConfig {
    /// 250 shuffle splits at 30% test, 10 inner folds, per-fold averaging.
    pub fn new(grid: Vec<Hyperparameters>, master_seed: u64) -> Self {
        CvConfig {
            outer: OuterStrategy::default(),
            inner_k: 10,
            grid,
            master_seed,
            selection: SelectionMode::default(),
            standardize: false,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let bad = |m: String| Err(EvaluationError::InvalidConfig(m));
        match self.outer {
            OuterStrategy::Kfold { k } | OuterStrategy::RepeatedKfold { k, .. } if k < 2 => {
                return bad(format!("outer k must be at least 2, got {k}"))
            }
            OuterStrategy::RepeatedKfold { n_repeats: 0, .. } => return bad("n_repeats must be at least 1".into()),
            OuterStrategy::RepeatedShuffle { n_iterations, test_fraction } => {
                if n_iterations == 0 {
                    return bad("n_iterations must be at least 1".into());
                }
                if !(test_fraction > 0.0 && test_fraction < 1.0) {
                    return bad(format!("test_fraction must be in (0, 1), got {test_fraction}"));
                }
            }
            _ => {}
        }
        if self.inner_k < 2 {
            return bad(format!("inner_k must be at least 2, got {}", self.inner_k));
        }
        if self.grid.is_empty() {
            return bad("hyperparameter grid is empty".into());
        }
        for hp in &self.grid {
            if hp.kind() != kind {
                return bad(format!("grid entry {hp} does not belong to a {kind} classifier"));
            }
            hp.validate()?;
        }
        Ok(())
    }
}

/// C in 1e-6..=1e2 (log spaced) for linear models; for forests
/// n_trees x max_features over {50, 100, 250, 500} x
/// {ceil(sqrt p), ceil(p/4), ceil(p/2), p}.
pub fn default_grid(kind: ModelKind, n_features: usize) -> Vec<Hyperparameters> {
    let cs = (-6..=2).map(|e| 10f64.powi(e));
    match kind {
        ModelKind::Svm => cs.map(|c| Hyperparameters::Svm { c }).collect(),
        ModelKind::LogReg => cs.map(|c| Hyperparameters::LogReg { c }).collect(),
        ModelKind::Forest => {
            let p = n_features.max(1);
            let mut mf = vec![(p as f64).sqrt().ceil() as usize, p.div_ceil(4), p.div_ceil(2), p];
            mf.sort_unstable();
            mf.dedup();
            [50, 100, 250, 500]
                .into_iter()
                .flat_map(|n_trees| {
                    mf.iter().map(move |&m| Hyperparameters::Forest { n_trees, max_features: MaxFeatures::Count(m) })
                })
                .collect()
        }
    }
}

/// Data handed to the evaluation routines. SVMs need the Gram matrix
/// (computed on demand from features); other models need feature rows.
#[derive(Clone, Copy, Debug)]
pub enum Inputs<'a> {
    Features(&'a FeatureMatrix),
    Gram(&'a GramMatrix),
    Both { features: &'a FeatureMatrix, gram: &'a GramMatrix },
}

impl<'a> Inputs<'a> {
    fn features(&self) -> Option<&'a FeatureMatrix> {
        match *self {
            Inputs::Features(f) | Inputs::Both { features: f, .. } => Some(f),
            Inputs::Gram(_) => None,
        }
    }

    fn gram(&self) -> Option<&'a GramMatrix> {
        match *self {
            Inputs::Gram(g) | Inputs::Both { gram: g, .. } => Some(g),
            Inputs::Features(_) => None,
        }
    }

    fn n(&self) -> usize {
        match self.features() {
            Some(f) => f.n_subjects(),
            None => self.gram().map_or(0, GramMatrix::n),
        }
    }
}

/// Sees every set of rows used to fit anything (models and standardization
/// statistics), tagged with the outer split it belongs to.
pub trait TrainingObserver: Sync {
    fn on_training(&self, split: usize, rows: &[usize]);
}

struct NoObserver;

impl TrainingObserver for NoObserver {
    fn on_training(&self, _: usize, _: &[usize]) {}
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub metrics: MetricsRecord,
    /// Best grid point of each inner fold.
    pub inner_choices: Vec<Hyperparameters>,
    /// Grid point retrained on the whole outer training set, if any.
    pub refit: Option<Hyperparameters>,
    pub non_converged_fits: usize,
    /// Outer model in feature space (linear classifiers with feature rows).
    pub linear_model: Option<LinearModel>,
}

impl SplitOutcome {
    /// `C=0.1` for a refit; per-fold choices joined by `|` otherwise.
    pub fn hyperparameter_label(&self) -> String {
        match &self.refit {
            Some(hp) => hp.to_string(),
            None => self.inner_choices.iter().map(ToString::to_string).collect::<Vec<_>>().join("|"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectPrediction {
    pub split: usize,
    /// Row index into the evaluated data.
    pub subject: usize,
    pub true_label: Label,
    pub predicted: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub kind: ModelKind,
    pub plan: SplitPlan,
    pub subject_ids: Vec<String>,
    pub splits: Vec<SplitOutcome>,
    /// Ordered by split, then by subject row.
    pub predictions: Vec<SubjectPrediction>,
    pub summary: Summary,
    /// Mean of the outer linear models; absent for forests.
    pub averaged_model: Option<LinearModel>,
}

impl ExperimentResult {
    pub fn non_converged_fits(&self) -> usize {
        self.splits.iter().map(|s| s.non_converged_fits).sum()
    }

    pub fn metrics(&self) -> Vec<MetricsRecord> {
        self.splits.iter().map(|s| s.metrics).collect()
    }
}

enum Candidate {
    Dual(SvmDualModel),
    Linear(LinearModel),
    Forest(ForestModel),
}

/// Outer model kept for scoring.
#[derive(Clone, Debug, PartialEq)]
pub enum OuterModel {
    Linear(LinearModel),
    /// `sum_i coef_i K(x_i, x) + bias` over global row indices.
    Dual { coefficients: Vec<(usize, f64)>, bias: f64 },
    Forest(ForestModel),
}

struct Engine<'a> {
    features: Option<&'a FeatureMatrix>,
    gram: Option<Cow<'a, GramMatrix>>,
    labels: &'a [Label],
    kind: ModelKind,
    grid: Vec<Hyperparameters>,
    inner_k: usize,
    selection: SelectionMode,
    standardize: bool,
    master_seed: u64,
    observer: &'a dyn TrainingObserver,
}

fn grid_key(hp: &Hyperparameters) -> (f64, usize, usize) {
    match *hp {
        Hyperparameters::Svm { c } | Hyperparameters::LogReg { c } => (c, 0, 0),
        Hyperparameters::Forest { n_trees, max_features } => {
            let m = match max_features {
                MaxFeatures::Count(m) => m,
                MaxFeatures::Sqrt => 0,
            };
            (0.0, n_trees, m)
        }
    }
}

impl<'a> Engine<'a> {
    fn new(
        inputs: Inputs<'a>,
        labels: &'a [Label],
        kind: ModelKind,
        config: &CvConfig,
        observer: &'a dyn TrainingObserver,
    ) -> Result<Self> {
        config.validate(kind)?;
        let n = inputs.n();
        if labels.len() != n {
            return Err(EvaluationError::LengthMismatch(format!("{} labels for {n} subjects", labels.len())));
        }
        if let Inputs::Both { features, gram } = inputs {
            if features.n_subjects() != gram.n() {
                return Err(EvaluationError::LengthMismatch(format!(
                    "{} feature rows, Gram of order {}",
                    features.n_subjects(),
                    gram.n()
                )));
            }
        }
        let features = inputs.features();
        let standardize = config.standardize && kind != ModelKind::Forest;
        match (kind, features) {
            (ModelKind::LogReg, None) => return Err(EvaluationError::MissingFeatures("logistic regression")),
            (ModelKind::Forest, None) => return Err(EvaluationError::MissingFeatures("random forest")),
            (ModelKind::Svm, None) if standardize => {
                return Err(EvaluationError::MissingFeatures("standardization"))
            }
            _ => {}
        }
        let p = features.map_or(0, FeatureMatrix::n_features);
        let mut grid = config
            .grid
            .iter()
            .map(|hp| match *hp {
                Hyperparameters::Forest { n_trees, max_features } => Ok(Hyperparameters::Forest {
                    n_trees,
                    max_features: MaxFeatures::Count(max_features.resolve(p)?),
                }),
                other => Ok(other),
            })
            .collect::<std::result::Result<Vec<_>, crate::classifiers::ClassifierError>>()?;
        grid.sort_by(|a, b| {
            let (ka, kb) = (grid_key(a), grid_key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.cmp(&kb.2))
        });
        grid.dedup();
        let gram = match inputs.gram() {
            Some(g) => Some(Cow::Borrowed(g)),
            None if kind == ModelKind::Svm && !standardize => Some(Cow::Owned(compute_gram(features.unwrap()))),
            None => None,
        };
        Ok(Engine {
            features,
            gram,
            labels,
            kind,
            grid,
            inner_k: config.inner_k,
            selection: config.selection,
            standardize,
            master_seed: config.master_seed,
            observer,
        })
    }

    fn subject_ids(&self) -> Vec<String> {
        match self.features {
            Some(f) => f.subject_ids().to_vec(),
            None => (0..self.labels.len()).map(|i| format!("row-{i}")).collect(),
        }
    }

    fn prepare(&self, split: usize, rows: Vec<usize>) -> Fit<'_> {
        self.observer.on_training(split, &rows);
        let labels: Vec<Label> = rows.iter().map(|&i| self.labels[i]).collect();
        let mut fit = Fit { engine: self, rows, labels, gram: None, x: None, standardizer: None };
        let features = self.features;
        match self.kind {
            ModelKind::Svm if self.standardize => {
                let f = features.expect("checked in Engine::new");
                let st = Standardizer::fit(f, &fit.rows);
                let x = st.transform(f, &fit.rows);
                fit.gram = Some(compute_gram(&x));
                fit.x = Some(x);
                fit.standardizer = Some(st);
            }
            ModelKind::Svm => {
                fit.gram = Some(self.gram.as_ref().expect("checked in Engine::new").submatrix(&fit.rows));
            }
            ModelKind::LogReg if self.standardize => {
                let f = features.expect("checked in Engine::new");
                let st = Standardizer::fit(f, &fit.rows);
                fit.x = Some(st.transform(f, &fit.rows));
                fit.standardizer = Some(st);
            }
            ModelKind::LogReg | ModelKind::Forest => {
                fit.x = Some(features.expect("checked in Engine::new").select_rows(&fit.rows));
            }
        }
        fit
    }

    fn label_of(&self, score: f64) -> Label {
        match self.kind {
            ModelKind::Forest => {
                if score >= 0.5 {
                    Label::Positive
                } else {
                    Label::Negative
                }
            }
            _ => Label::from_score(score),
        }
    }

    fn score_outer(&self, model: &OuterModel, t: usize) -> Result<f64> {
        Ok(match model {
            OuterModel::Linear(m) => m.score(self.features.expect("linear models carry features").row(t))?,
            OuterModel::Dual { coefficients, bias } => {
                let row = self.gram.as_ref().expect("dual models carry a Gram").row(t);
                bias + coefficients.iter().map(|&(i, c)| c * row[i]).sum::<f64>()
            }
            OuterModel::Forest(f) => predict_forest(f, self.features.expect("forests carry features").row(t))?.score,
        })
    }

    fn average(&self, models: Vec<OuterModel>) -> Result<OuterModel> {
        if models.iter().all(|m| matches!(m, OuterModel::Linear(_))) {
            let linear: Vec<LinearModel> = models
                .into_iter()
                .map(|m| match m {
                    OuterModel::Linear(l) => l,
                    _ => unreachable!(),
                })
                .collect();
            return Ok(OuterModel::Linear(average_linear_models(&linear)?));
        }
        let k = models.len() as f64;
        let mut sum: BTreeMap<usize, f64> = BTreeMap::new();
        let mut bias = 0.0;
        for m in models {
            match m {
                OuterModel::Dual { coefficients, bias: b } => {
                    for (i, c) in coefficients {
                        *sum.entry(i).or_insert(0.0) += c;
                    }
                    bias += b;
                }
                _ => return Err(EvaluationError::InvalidConfig("cannot average these models".into())),
            }
        }
        Ok(OuterModel::Dual { coefficients: sum.into_iter().map(|(i, c)| (i, c / k)).collect(), bias: bias / k })
    }

    /// Inner selection on `train`, returning the outer model.
    fn fit_outer(&self, split: usize, train: &[usize]) -> Result<OuterFit> {
        let train_labels: Vec<Label> = train.iter().map(|&i| self.labels[i]).collect();
        let inner = stratified_kfold(&train_labels, self.inner_k, derive_seed(self.master_seed, Stream::InnerFolds, split as u64))
            .map_err(|e| match e {
                EvaluationError::KTooLarge { .. } => EvaluationError::InnerFoldDegenerate { split, inner_k: self.inner_k },
                other => other,
            })?;
        let forest_seed = derive_seed(self.master_seed, Stream::Forest, split as u64);
        let keep_fold_models = self.selection == SelectionMode::PerFoldAverage && self.kind != ModelKind::Forest;
        let mut scores = vec![vec![0.0; self.grid.len()]; self.inner_k];
        let mut best_per_fold = Vec::with_capacity(self.inner_k);
        let mut fold_models = Vec::new();
        let mut non_converged = 0;
        for (f, fold) in inner.splits.iter().enumerate() {
            let rows: Vec<usize> = fold.train.iter().map(|&i| train[i]).collect();
            let val: Vec<usize> = fold.test.iter().map(|&i| train[i]).collect();
            let truth: Vec<Label> = val.iter().map(|&i| self.labels[i]).collect();
            let fit = self.prepare(split, rows);
            let mut best: Option<(f64, usize, Candidate)> = None;
            for (g, hp) in self.grid.iter().enumerate() {
                let (cand, converged) = fit.train(hp, mix(forest_seed, f as u64))?;
                non_converged += usize::from(!converged);
                let predicted = val.iter().map(|&t| self.label_of(fit.score(&cand, t))).collect::<Vec<_>>();
                let ba = balanced_accuracy(&truth, &predicted);
                scores[f][g] = ba;
                if best.as_ref().is_none_or(|(b, _, _)| ba > *b) {
                    best = Some((ba, g, cand));
                }
            }
            let (_, g, cand) = best.expect("grid is nonempty");
            best_per_fold.push(g);
            if keep_fold_models {
                fold_models.push(fit.finalize(cand)?);
            }
        }
        let inner_choices = best_per_fold.iter().map(|&g| self.grid[g]).collect();
        let refit_index = match (self.selection, self.kind) {
            (SelectionMode::PerFoldAverage, ModelKind::Forest) => {
                let mut votes = vec![0usize; self.grid.len()];
                best_per_fold.iter().for_each(|&g| votes[g] += 1);
                Some(first_argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            }
            (SelectionMode::PerFoldAverage, _) => None,
            (SelectionMode::MeanScoreRetrain, _) => {
                let means: Vec<f64> = (0..self.grid.len())
                    .map(|g| scores.iter().map(|row| row[g]).sum::<f64>() / self.inner_k as f64)
                    .collect();
                Some(first_argmax(&means))
            }
        };
        let model = match refit_index {
            None => self.average(fold_models)?,
            Some(g) => {
                let fit = self.prepare(split, train.to_vec());
                let (cand, converged) = fit.train(&self.grid[g], mix(forest_seed, self.inner_k as u64))?;
                non_converged += usize::from(!converged);
                fit.finalize(cand)?
            }
        };
        Ok(OuterFit { model, inner_choices, refit: refit_index.map(|g| self.grid[g]), non_converged })
    }

    fn evaluate(&self, split: usize, model: &OuterModel, test: &[usize]) -> Result<(MetricsRecord, Vec<SubjectPrediction>)> {
        let mut predictions = Vec::with_capacity(test.len());
        for &t in test {
            let score = self.score_outer(model, t)?;
            predictions.push(SubjectPrediction {
                split,
                subject: t,
                true_label: self.labels[t],
                predicted: self.label_of(score),
                score,
            });
        }
        let truth: Vec<Label> = predictions.iter().map(|p| p.true_label).collect();
        let predicted: Vec<Label> = predictions.iter().map(|p| p.predicted).collect();
        let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
        Ok((compute_metrics(&truth, &predicted, &scores)?, predictions))
    }

    fn run_split(&self, index: usize, split: &Split) -> Result<(SplitOutcome, Vec<SubjectPrediction>)> {
        let fit = self.fit_outer(index, &split.train)?;
        let (metrics, predictions) = self.evaluate(index, &fit.model, &split.test)?;
        let linear_model = match fit.model {
            OuterModel::Linear(l) => Some(l),
            _ => None,
        };
        Ok((
            SplitOutcome {
                index,
                train: split.train.clone(),
                test: split.test.clone(),
                metrics,
                inner_choices: fit.inner_choices,
                refit: fit.refit,
                non_converged_fits: fit.non_converged,
                linear_model,
            },
            predictions,
        ))
    }
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct OuterFit {
    model: OuterModel,
    inner_choices: Vec<Hyperparameters>,
    refit: Option<Hyperparameters>,
    non_converged: usize,
}

struct Fit<'e> {
    engine: &'e Engine<'e>,
    rows: Vec<usize>,
    labels: Vec<Label>,
    gram: Option<GramMatrix>,
    x: Option<FeatureMatrix>,
    standardizer: Option<Standardizer>,
}

impl Fit<'_> {
    fn to_raw(&self, weights: &[f64], bias: f64) -> Result<LinearModel> {
        let (w, b) = match &self.standardizer {
            Some(st) => st.unstandardize(weights, bias),
            None => (weights.to_vec(), bias),
        };
        Ok(LinearModel::new(w, b)?)
    }

    fn train(&self, hp: &Hyperparameters, seed: u64) -> Result<(Candidate, bool)> {
        Ok(match *hp {
            Hyperparameters::Svm { c } => {
                let m = train_svm_dual(self.gram.as_ref().expect("SVM fits hold a Gram"), &self.labels, c)?;
                let converged = m.converged;
                match &self.x {
                    Some(x) => {
                        let w = reconstruct_weights(&m, x)?;
                        (Candidate::Linear(self.to_raw(&w.weights, w.bias)?), converged)
                    }
                    None => (Candidate::Dual(m), converged),
                }
            }
            Hyperparameters::LogReg { c } => {
                let m = train_logreg(self.x.as_ref().expect("logistic fits hold rows"), &self.labels, c)?;
                (Candidate::Linear(self.to_raw(&m.weights, m.bias)?), m.converged)
            }
            Hyperparameters::Forest { n_trees, max_features } => {
                let m = train_forest(self.x.as_ref().expect("forest fits hold rows"), &self.labels, n_trees, max_features, seed)?;
                (Candidate::Forest(m), true)
            }
        })
    }

    fn score(&self, cand: &Candidate, t: usize) -> f64 {
        let engine = self.engine;
        match cand {
            Candidate::Dual(m) => {
                let row = engine.gram.as_ref().expect("dual candidates need the global Gram").row(t);
                m.bias
                    + m.support_indices
                        .iter()
                        .map(|&i| m.alpha[i] * m.train_labels[i].sign() * row[self.rows[i]])
                        .sum::<f64>()
            }
            Candidate::Linear(l) => {
                let x = engine.features.expect("linear candidates need features").row(t);
                crate::classifiers::LinearModel::score(l, x).expect("dimensions checked at training")
            }
            Candidate::Forest(f) => {
                predict_forest(f, engine.features.expect("forests need features").row(t)).expect("dimensions checked").score
            }
        }
    }

    fn finalize(&self, cand: Candidate) -> Result<OuterModel> {
        Ok(match cand {
            Candidate::Dual(m) => match self.engine.features {
                Some(f) => OuterModel::Linear(reconstruct_weights(&m, &f.select_rows(&self.rows))?),
                None => OuterModel::Dual {
                    coefficients: m
                        .support_indices
                        .iter()
                        .map(|&i| (self.rows[i], m.alpha[i] * m.train_labels[i].sign()))
                        .collect(),
                    bias: m.bias,
                },
            },
            Candidate::Linear(l) => OuterModel::Linear(l),
            Candidate::Forest(f) => OuterModel::Forest(f),
        })
    }
}

fn build_plan(labels: &[Label], config: &CvConfig) -> Result<SplitPlan> {
    let seed = config.master_seed;
    let mut plan = match config.outer {
        OuterStrategy::Kfold { k } => stratified_kfold(labels, k, derive_seed(seed, Stream::OuterSplits, 0))?,
        OuterStrategy::RepeatedKfold { k, n_repeats } => repeated_stratified_kfold(labels, k, n_repeats, seed)?,
        OuterStrategy::RepeatedShuffle { n_iterations, test_fraction } => {
            stratified_shuffle_splits(labels, n_iterations, test_fraction, seed)?
        }
    };
    plan.master_seed = seed;
    Ok(plan)
}

pub fn nested_cv(inputs: Inputs<'_>, labels: &[Label], kind: ModelKind, config: &CvConfig) -> Result<ExperimentResult> {
    nested_cv_observed(inputs, labels, kind, config, &NoObserver)
}

/// Nested cross-validation: outer splits run in parallel, each with its own
/// inner stratified k-fold selection. Results are assembled in split order.
pub fn nested_cv_observed(
    inputs: Inputs<'_>,
    labels: &[Label],
    kind: ModelKind,
    config: &CvConfig,
    observer: &dyn TrainingObserver,
) -> Result<ExperimentResult> {
    let engine = Engine::new(inputs, labels, kind, config, observer)?;
    let plan = build_plan(labels, config)?;
    let outcomes = plan
        .splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| engine.run_split(i, split))
        .collect::<Vec<_>>();
    let mut splits = Vec::with_capacity(outcomes.len());
    let mut predictions = Vec::new();
    for outcome in outcomes {
        let (s, p) = outcome?;
        splits.push(s);
        predictions.extend(p);
    }
    let linear: Option<Vec<LinearModel>> = splits.iter().map(|s| s.linear_model.clone()).collect();
    let averaged_model = match linear {
        Some(models) => Some(average_linear_models(&models)?),
        None => None,
    };
    let summary = Summary::from_records(&splits.iter().map(|s| s.metrics).collect::<Vec<_>>());
    Ok(ExperimentResult { kind, plan, subject_ids: engine.subject_ids(), splits, predictions, summary, averaged_model })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurvePoint {
    pub fraction: f64,
    /// Balanced accuracy per outer split; `None` where the subset was too
    /// small for the inner folds.
    pub balanced_accuracy: Vec<Option<f64>>,
    /// Over evaluated splits; `None` when every split was skipped.
    pub summary: Option<MetricSummary>,
}

impl LearningCurvePoint {
    pub fn n_skipped(&self) -> usize {
        self.balanced_accuracy.iter().filter(|v| v.is_none()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    pub plan: SplitPlan,
    pub points: Vec<LearningCurvePoint>,
}

/// Training-set size sweep. For each outer shuffle split the training
/// members of each class are shuffled once and every fraction takes a
/// stratified prefix, so smaller subsets are nested in larger ones and
/// fraction 1.0 reproduces the plain nested run on that split.
pub fn learning_curve(
    inputs: Inputs<'_>,
    labels: &[Label],
    kind: ModelKind,
    config: &CvConfig,
    fractions: &[f64],
) -> Result<LearningCurve> {
    if !matches!(config.outer, OuterStrategy::RepeatedShuffle { .. }) {
        return Err(EvaluationError::InvalidConfig("learning curves need shuffle-split outer validation".into()));
    }
    if fractions.is_empty()
        || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        || fractions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(EvaluationError::InvalidConfig("fractions must be strictly ascending within (0, 1]".into()));
    }
    let engine = Engine::new(inputs, labels, kind, config, &NoObserver)?;
    let plan = build_plan(labels, config)?;
    let rows = plan
        .splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| -> Result<Vec<Option<f64>>> {
            let mut rng = rng_from(derive_seed(config.master_seed, Stream::LearningCurve, i as u64));
            let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for &t in &split.train {
                classes[usize::from(labels[t].is_positive())].push(t);
            }
            classes.iter_mut().for_each(|c| c.shuffle(&mut rng));
            fractions
                .iter()
                .map(|&f| {
                    let take = classes.each_ref().map(|c| (f * c.len() as f64).round() as usize);
                    if take.iter().any(|&m| m < engine.inner_k) {
                        return Ok(None);
                    }
                    let mut subset: Vec<usize> = classes[0][..take[0]].iter().chain(&classes[1][..take[1]]).copied().collect();
                    subset.sort_unstable();
                    let fit = engine.fit_outer(i, &subset)?;
                    let (metrics, _) = engine.evaluate(i, &fit.model, &split.test)?;
                    Ok(Some(metrics.balanced_accuracy))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let points = fractions
        .iter()
        .enumerate()
        .map(|(j, &fraction)| {
            let balanced_accuracy: Vec<Option<f64>> = rows.iter().map(|r| r[j]).collect();
            let values: Vec<f64> = balanced_accuracy.iter().flatten().copied().collect();
            let summary = (!values.is_empty()).then(|| mean_sd(&values));
            LearningCurvePoint { fraction, balanced_accuracy, summary }
        })
        .collect();
    Ok(LearningCurve { plan, points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossDatasetResult {
    pub metrics: MetricsRecord,
    /// `subject` indexes the external test set.
    pub predictions: Vec<SubjectPrediction>,
    pub test_subject_ids: Vec<String>,
    pub inner_choices: Vec<Hyperparameters>,
    pub refit: Option<Hyperparameters>,
    pub model: Option<LinearModel>,
    pub non_converged_fits: usize,
}

/// Selects hyperparameters by inner CV on the training dataset only, then
/// scores the external test dataset once. The outer strategy of `config`
/// is not used.
pub fn cross_dataset_eval(
    train: &FeatureMatrix,
    train_labels: &[Label],
    test: &FeatureMatrix,
    test_labels: &[Label],
    kind: ModelKind,
    config: &CvConfig,
) -> Result<CrossDatasetResult> {
    if train.descriptor().content_hash() != test.descriptor().content_hash() || train.n_features() != test.n_features() {
        return Err(EvaluationError::DescriptorMismatch(format!(
            "train {} ({} features) vs test {} ({} features)",
            train.descriptor().content_hash(),
            train.n_features(),
            test.descriptor().content_hash(),
            test.n_features()
        )));
    }
    if test_labels.len() != test.n_subjects() {
        return Err(EvaluationError::LengthMismatch(format!(
            "{} labels for {} test subjects",
            test_labels.len(),
            test.n_subjects()
        )));
    }
    let stacked = train.stack(test)?;
    let mut labels = train_labels.to_vec();
    labels.extend_from_slice(test_labels);
    let engine = Engine::new(Inputs::Features(&stacked), &labels, kind, config, &NoObserver)?;
    let n_train = train.n_subjects();
    let train_rows: Vec<usize> = (0..n_train).collect();
    let test_rows: Vec<usize> = (n_train..stacked.n_subjects()).collect();
    let fit = engine.fit_outer(0, &train_rows)?;
    let (metrics, mut predictions) = engine.evaluate(0, &fit.model, &test_rows)?;
    predictions.iter_mut().for_each(|p| p.subject -= n_train);
    Ok(CrossDatasetResult {
        metrics,
        predictions,
        test_subject_ids: test.subject_ids().to_vec(),
        inner_choices: fit.inner_choices,
        refit: fit.refit,
        model: match fit.model {
            OuterModel::Linear(l) => Some(l),
            _ => None,
        },
        non_converged_fits: fit.non_converged,
    })
}

impl ExperimentResult {
    pub fn strategy(&self) -> SplitStrategy {
        self.plan.strategy
    }
}
