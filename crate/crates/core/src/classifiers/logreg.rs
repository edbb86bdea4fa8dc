use std::collections::VecDeque;

use crate::features::FeatureMatrix;
use crate::label::Label;

use super::{check_c, check_labels, dot, ClassifierError, LinearModel, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegOptions {
    /// Stop when the gradient infinity norm falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions { tolerance: 1e-6, max_iterations: 1000, memory: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Gradient infinity norm at the returned point.
    pub gradient_norm: f64,
}

impl LogRegModel {
    pub fn linear(&self) -> LinearModel {
        LinearModel { weights: self.weights.clone(), bias: self.bias }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegPrediction {
    pub score: f64,
    pub probability: f64,
    pub label: Label,
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1 / (1 + exp(-t))` without overflow.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a FeatureMatrix,
    y: Vec<f64>,
    c: f64,
}

impl Problem<'_> {
    /// `theta = (w, b)`. Returns objective and writes the gradient.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.x.n_features();
        let (w, b) = (&theta[..p], theta[p]);
        let mut f = 0.5 * dot(w, w);
        grad[..p].copy_from_slice(w);
        grad[p] = 0.0;
        for i in 0..self.x.n_subjects() {
            let row = self.x.row(i);
            let margin = self.y[i] * (dot(w, row) + b);
            f += self.c * softplus(-margin);
            let coef = -self.c * self.y[i] * sigmoid(-margin);
            for (g, v) in grad[..p].iter_mut().zip(row) {
                *g += coef * v;
            }
            grad[p] += coef;
        }
        f
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `1/2 |w|^2 + C sum log(1 + exp(-y (w.x + b)))`
pub fn logreg_objective(features: &FeatureMatrix, labels: &[Label], c: f64, weights: &[f64], bias: f64) -> f64 {
    let mut theta = weights.to_vec();
    theta.push(bias);
    let mut g = vec![0.0; theta.len()];
    Problem { x: features, y: labels.iter().map(|l| l.sign()).collect(), c }.eval(&theta, &mut g)
}

/// Gradient of [`logreg_objective`] with respect to `(w, b)`.
pub fn logreg_gradient(features: &FeatureMatrix, labels: &[Label], c: f64, weights: &[f64], bias: f64) -> Vec<f64> {
    let mut theta = weights.to_vec();
    theta.push(bias);
    let mut g = vec![0.0; theta.len()];
    Problem { x: features, y: labels.iter().map(|l| l.sign()).collect(), c }.eval(&theta, &mut g);
    g
}

pub fn train_logreg(features: &FeatureMatrix, labels: &[Label], c: f64) -> Result<LogRegModel> {
    train_logreg_with(features, labels, c, &LogRegOptions::default())
}

/// L-BFGS with backtracking Armijo line search.
pub fn train_logreg_with(
    features: &FeatureMatrix,
    labels: &[Label],
    c: f64,
    options: &LogRegOptions,
) -> Result<LogRegModel> {
    check_labels(labels, features.n_subjects())?;
    check_c(c)?;
    let problem = Problem { x: features, y: labels.iter().map(|l| l.sign()).collect(), c };
    let dim = features.n_features() + 1;
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut f = problem.eval(&theta, &mut grad);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(options.memory);
    let mut iterations = 0;
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];

    while inf_norm(&grad) > options.tolerance && iterations < options.max_iterations {
        if !f.is_finite() {
            return Err(ClassifierError::NonFinite("logistic objective".into()));
        }
        iterations += 1;
        let mut dir = two_loop(&grad, &history);
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let mut step = if history.is_empty() { 1.0 / inf_norm(&grad).max(1.0) } else { 1.0 };
        let slack = 4.0 * f64::EPSILON * f.abs();
        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..60 {
            for k in 0..dim {
                trial[k] = theta[k] + step * dir[k];
            }
            f_new = problem.eval(&trial, &mut trial_grad);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope + slack {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let s: Vec<f64> = (0..dim).map(|k| trial[k] - theta[k]).collect();
        let yv: Vec<f64> = (0..dim).map(|k| trial_grad[k] - grad[k]).collect();
        let sy = dot(&s, &yv);
        theta.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        f = f_new;
        if sy > 1e-12 * dot(&yv, &yv).max(f64::MIN_POSITIVE) {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
    }

    let gradient_norm = inf_norm(&grad);
    let p = features.n_features();
    let bias = theta[p];
    theta.truncate(p);
    if !bias.is_finite() || theta.iter().any(|w| !w.is_finite()) {
        return Err(ClassifierError::NonFinite("logistic weights".into()));
    }
    Ok(LogRegModel {
        weights: theta,
        bias,
        c,
        converged: gradient_norm <= options.tolerance,
        iterations,
        gradient_norm,
    })
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qk, yk) in q.iter_mut().zip(y) {
            *qk -= a * yk;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qk, sk) in q.iter_mut().zip(s) {
            *qk += (a - b) * sk;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub fn predict_logreg(model: &LogRegModel, x: &[f64]) -> Result<LogRegPrediction> {
    if x.len() != model.weights.len() {
        return Err(ClassifierError::DimensionMismatch(format!(
            "model has {} weights, input has {} features",
            model.weights.len(),
            x.len()
        )));
    }
    let score = dot(&model.weights, x) + model.bias;
    Ok(LogRegPrediction { score, probability: sigmoid(score), label: Label::from_score(score) })
}
