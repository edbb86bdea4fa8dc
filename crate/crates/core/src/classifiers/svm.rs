use crate::features::{FeatureMatrix, GramMatrix};
use crate::label::Label;

use super::{check_c, check_labels, ClassifierError, LinearModel, Result};

const TAU: f64 = 1e-12;
/// Pair updates per training row between Newton steps on the free set.
const NEWTON_PERIOD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmOptions {
    /// Stop when the maximal KKT violation falls below this.
    pub tolerance: f64,
    /// Cap on pair updates.
    pub max_iterations: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions { tolerance: 1e-4, max_iterations: 1_000_000 }
    }
}

/// Dual soft-margin SVM. The decision function over training rows `i` is
/// `sum_i alpha_i y_i K(x_i, x) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmDualModel {
    pub alpha: Vec<f64>,
    pub train_labels: Vec<Label>,
    pub bias: f64,
    pub c: f64,
    pub support_indices: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    /// Maximal KKT violation at exit.
    pub violation: f64,
}

impl SvmDualModel {
    /// `alpha_i * y_i` for each training row.
    pub fn dual_coefficients(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.train_labels).map(|(a, y)| a * y.sign()).collect()
    }
}

/// `sum alpha - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`
pub fn svm_dual_objective(gram: &GramMatrix, labels: &[Label], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        let row = gram.row(i);
        for j in 0..n {
            quad += alpha[i] * alpha[j] * labels[i].sign() * labels[j].sign() * row[j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

pub fn train_svm_dual(gram: &GramMatrix, labels: &[Label], c: f64) -> Result<SvmDualModel> {
    train_svm_dual_with(gram, labels, c, &SvmOptions::default())
}

/// Sequential minimal optimization with maximal-violating-pair selection,
/// in the minimization form `f(a) = 1/2 a'Qa - e'a`, `Q_ij = y_i y_j K_ij`.
///
/// Pairwise steps crawl when the free multipliers span an ill-conditioned
/// block of Q, as with low-rank linear kernels and large C. Every
/// `NEWTON_PERIOD * n` pair updates the free block therefore takes
/// projected Newton steps, each clipped to the box, until one lands inside
/// it. The stopping rule is unchanged.
pub fn train_svm_dual_with(gram: &GramMatrix, labels: &[Label], c: f64, options: &SvmOptions) -> Result<SvmDualModel> {
    let n = gram.n();
    check_labels(labels, n)?;
    check_c(c)?;
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
    let diag: Vec<f64> = (0..n).map(|i| gram.get(i, i)).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];

    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    let period = NEWTON_PERIOD * n.max(1);
    let mut last_newton = 0;

    let mut iterations = 0;
    let mut violation;
    let mut converged = false;
    loop {
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        let mut i_sel = usize::MAX;
        let mut j_sel = usize::MAX;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > g_max {
                g_max = v;
                i_sel = t;
            }
            if in_low(alpha[t], y[t]) && v < g_min {
                g_min = v;
                j_sel = t;
            }
        }
        violation = if i_sel == usize::MAX || j_sel == usize::MAX { 0.0 } else { g_max - g_min };
        if violation < options.tolerance {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }
        if iterations >= last_newton + period {
            last_newton = iterations;
            let mut moved = false;
            for _ in 0..n {
                match newton_step(gram, &y, c, &mut alpha) {
                    Step::Full => {
                        moved = true;
                        break;
                    }
                    Step::Clipped => moved = true,
                    Step::None => break,
                }
            }
            if moved {
                grad = full_gradient(gram, &y, &alpha);
                continue;
            }
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let k_ij = gram.get(i, j);
        let raw_quad = diag[i] + diag[j] - 2.0 * k_ij;
        if raw_quad < -1e-10 * (diag[i] + diag[j]).max(1.0) {
            return Err(ClassifierError::NonPsdGram(format!(
                "negative curvature {raw_quad:e} for pair ({i}, {j})"
            )));
        }
        let quad = if raw_quad <= 0.0 { TAU } else { raw_quad };
        let (old_i, old_j) = (alpha[i], alpha[j]);

        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let d_i = alpha[i] - old_i;
        let d_j = alpha[j] - old_j;
        let q_ij = y[i] * y[j] * k_ij;
        let change = d_i * grad[i] + d_j * grad[j] + 0.5 * (d_i * d_i * diag[i] + d_j * d_j * diag[j]) + d_i * d_j * q_ij;
        debug_assert!(
            change <= 1e-9 * (1.0 + grad[i].abs() + grad[j].abs()) * (d_i.abs() + d_j.abs()) + 1e-12,
            "dual objective decreased by {change}"
        );
        let (row_i, row_j) = (gram.row(i), gram.row(j));
        for t in 0..n {
            grad[t] += y[t] * (y[i] * row_i[t] * d_i + y[j] * row_j[t] * d_j);
        }
    }

    let bias = -rho(&alpha, &y, &grad, c);
    if !bias.is_finite() || alpha.iter().any(|a| !a.is_finite()) {
        return Err(ClassifierError::NonFinite("SVM solution".into()));
    }
    let support_indices = (0..n).filter(|&i| alpha[i] > 0.0).collect();
    Ok(SvmDualModel {
        alpha,
        train_labels: labels.to_vec(),
        bias,
        c,
        support_indices,
        converged,
        iterations,
        violation,
    })
}

fn full_gradient(gram: &GramMatrix, y: &[f64], alpha: &[f64]) -> Vec<f64> {
    let mut grad = vec![-1.0; y.len()];
    for (s, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = gram.row(s);
        for t in 0..y.len() {
            grad[t] += y[t] * y[s] * row[t] * a;
        }
    }
    grad
}

enum Step {
    None,
    /// Reached the minimizer over the current free set.
    Full,
    /// Stopped at the box; the free set shrank.
    Clipped,
}

/// Newton step on the free multipliers `F` with the bounded ones held:
/// minimizes the quadratic over `y_F'd = 0` using `Q_FF + eps I`, then
/// scales the step back into the box.
fn newton_step(gram: &GramMatrix, y: &[f64], c: f64, alpha: &mut [f64]) -> Step {
    let free: Vec<usize> = (0..alpha.len()).filter(|&t| alpha[t] > 0.0 && alpha[t] < c).collect();
    let m = free.len();
    if m < 2 {
        return Step::None;
    }
    let grad = full_gradient(gram, y, alpha);
    let yf: Vec<f64> = free.iter().map(|&t| y[t]).collect();
    let mf = m as f64;
    let mut q = vec![0.0; m * m];
    for r in 0..m {
        for s in 0..m {
            q[r * m + s] = yf[r] * yf[s] * gram.get(free[r], free[s]);
        }
    }
    // Project onto y'd = 0: B = P Q P with P = I - y y' / m.
    let qy: Vec<f64> = (0..m).map(|r| (0..m).map(|s| q[r * m + s] * yf[s]).sum()).collect();
    let yqy: f64 = qy.iter().zip(&yf).map(|(a, b)| a * b).sum();
    let b_at = |r: usize, s: usize| q[r * m + s] - (yf[r] * qy[s] + qy[r] * yf[s]) / mf + yf[r] * yf[s] * yqy / (mf * mf);
    let project = |v: &mut [f64]| {
        let k = v.iter().zip(&yf).map(|(a, b)| a * b).sum::<f64>() / mf;
        v.iter_mut().zip(&yf).for_each(|(a, b)| *a -= k * b);
    };
    let mut rhs: Vec<f64> = free.iter().map(|&t| -grad[t]).collect();
    project(&mut rhs);

    let max_diag = (0..m).map(|r| q[r * m + r]).fold(0.0, f64::max);
    let mut eps = 1e-10 * max_diag.max(1e-300);
    let chol = loop {
        if let Some(l) = cholesky(m, |r, s| b_at(r, s) + if r == s { eps } else { 0.0 }) {
            break l;
        }
        eps *= 100.0;
        if eps > 1e-2 * max_diag {
            return Step::None;
        }
    };
    let mut d = chol_solve(&chol, m, rhs);
    project(&mut d);
    let gd: f64 = free.iter().zip(&d).map(|(&t, x)| grad[t] * x).sum();
    let dqd: f64 = (0..m).map(|r| d[r] * (0..m).map(|s| q[r * m + s] * d[s]).sum::<f64>()).sum();

    let mut theta: f64 = 1.0;
    for (&t, &dt) in free.iter().zip(&d) {
        if dt > 0.0 {
            theta = theta.min((c - alpha[t]) / dt);
        } else if dt < 0.0 {
            theta = theta.min(-alpha[t] / dt);
        }
    }
    if !(theta > 0.0) || !(theta * gd + 0.5 * theta * theta * dqd < 0.0) {
        return Step::None;
    }
    for (&t, &dt) in free.iter().zip(&d) {
        let hi = (c - alpha[t]) / dt;
        let lo = -alpha[t] / dt;
        alpha[t] = if dt > 0.0 && theta >= hi {
            c
        } else if dt < 0.0 && theta >= lo {
            0.0
        } else {
            (alpha[t] + theta * dt).clamp(0.0, c)
        };
    }
    if theta < 1.0 {
        Step::Clipped
    } else {
        Step::Full
    }
}

/// Lower-triangular Cholesky factor, row-major; `None` unless positive
/// definite.
fn cholesky(m: usize, a: impl Fn(usize, usize) -> f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * m + k] * l[j * m + k]).sum();
            let v = a(i, j) - dot;
            if i == j {
                if !(v > 0.0) {
                    return None;
                }
                l[i * m + i] = v.sqrt();
            } else {
                l[i * m + j] = v / l[j * m + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], m: usize, mut b: Vec<f64>) -> Vec<f64> {
    for i in 0..m {
        let s: f64 = (0..i).map(|k| l[i * m + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * m + i];
    }
    for i in (0..m).rev() {
        let s: f64 = (i + 1..m).map(|k| l[k * m + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * m + i];
    }
    b
}

/// Offset from free support vectors, or the midpoint of the feasible
/// interval when every multiplier sits at a bound.
fn rho(alpha: &[f64], y: &[f64], grad: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut n_free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    if n_free > 0 {
        free_sum / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// `sum_i alpha_i y_i k_i + b` for a kernel row against the training set.
pub fn predict_svm(model: &SvmDualModel, kernel_row: &[f64]) -> Result<f64> {
    if kernel_row.len() != model.alpha.len() {
        return Err(ClassifierError::LengthMismatch { expected: model.alpha.len(), actual: kernel_row.len() });
    }
    let mut score = model.bias;
    for &i in &model.support_indices {
        score += model.alpha[i] * model.train_labels[i].sign() * kernel_row[i];
    }
    Ok(score)
}

/// Primal weights `w = sum_i alpha_i y_i x_i`.
pub fn reconstruct_weights(model: &SvmDualModel, train_features: &FeatureMatrix) -> Result<LinearModel> {
    if train_features.n_subjects() != model.alpha.len() {
        return Err(ClassifierError::DimensionMismatch(format!(
            "model trained on {} rows, {} feature rows given",
            model.alpha.len(),
            train_features.n_subjects()
        )));
    }
    let mut w = vec![0.0; train_features.n_features()];
    for &i in &model.support_indices {
        let coef = model.alpha[i] * model.train_labels[i].sign();
        for (acc, x) in w.iter_mut().zip(train_features.row(i)) {
            *acc += coef * x;
        }
    }
    LinearModel::new(w, model.bias)
}
