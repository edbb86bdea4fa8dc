use rand::Rng;
use rayon::prelude::*;

use crate::features::FeatureMatrix;
use crate::label::Label;
use crate::seed::{derive_seed, rng_from, Stream};

use super::{check_labels, ClassifierError, MaxFeatures, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// In-bag class counts reaching this leaf.
    Leaf { negative: usize, positive: usize },
}

/// Nodes in creation order; the root is node 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> Label {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Split { feature, threshold, left, right } => {
                    k = if x[feature] <= threshold { left } else { right };
                }
                Node::Leaf { negative, positive } => {
                    return if positive >= negative { Label::Positive } else { Label::Negative };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match t.nodes[k] {
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    /// Resolved candidate-feature count per split.
    pub max_features: usize,
    pub seed: u64,
    pub n_features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestPrediction {
    pub label: Label,
    /// Fraction of trees voting positive.
    pub score: f64,
}

/// Bagged CART trees with Gini splits, grown until pure or fewer than two
/// samples. Tree `t` draws from its own stream derived from `seed`.
pub fn train_forest(
    features: &FeatureMatrix,
    labels: &[Label],
    n_trees: usize,
    max_features: MaxFeatures,
    seed: u64,
) -> Result<ForestModel> {
    if n_trees == 0 {
        return Err(ClassifierError::InvalidHyperparameter("n_trees must be at least 1".into()));
    }
    check_labels(labels, features.n_subjects())?;
    let p = features.n_features();
    let k = max_features.resolve(p)?;
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(derive_seed(seed, Stream::Forest, t as u64));
            let n = features.n_subjects();
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow_tree(features, labels, sample, k, &mut rng)
        })
        .collect();
    Ok(ForestModel { trees, n_trees, max_features: k, seed, n_features: p })
}

/// In-bag sample (with repeats) drawn for tree `t`.
#[cfg(test)]
fn bootstrap_sample(n: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut rng = rng_from(derive_seed(seed, Stream::Forest, t as u64));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

struct Best {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn counts(labels: &[Label], sample: &[usize]) -> (usize, usize) {
    let pos = sample.iter().filter(|&&i| labels[i].is_positive()).count();
    (sample.len() - pos, pos)
}

/// `n * gini` for a node with these counts.
fn weighted_gini(neg: usize, pos: usize) -> f64 {
    let n = (neg + pos) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (a, b) = (neg as f64, pos as f64);
    n - (a * a + b * b) / n
}

/// Lowest weighted Gini over thresholds between consecutive distinct values
/// of `feature`; `None` when the feature is constant on the sample.
fn best_threshold(features: &FeatureMatrix, labels: &[Label], sample: &[usize], feature: usize) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, bool)> = sample.iter().map(|&i| (features.row(i)[feature], labels[i].is_positive())).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pairs[0].0 == pairs[pairs.len() - 1].0 {
        return None;
    }
    let total_pos = pairs.iter().filter(|p| p.1).count();
    let total = pairs.len();
    let mut left_pos = 0;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..total - 1 {
        if pairs[k].1 {
            left_pos += 1;
        }
        let (lo, hi) = (pairs[k].0, pairs[k + 1].0);
        if lo == hi {
            continue;
        }
        let left_n = k + 1;
        let imp = weighted_gini(left_n - left_pos, left_pos)
            + weighted_gini(total - left_n - (total_pos - left_pos), total_pos - left_pos);
        if best.is_none_or(|(b, _)| imp < b) {
            let mid = lo + (hi - lo) / 2.0;
            let threshold = if mid < hi { mid } else { lo };
            best = Some((imp, threshold));
        }
    }
    best
}

fn grow_tree<R: Rng>(features: &FeatureMatrix, labels: &[Label], sample: Vec<usize>, k: usize, rng: &mut R) -> Tree {
    let p = features.n_features();
    let mut nodes = vec![Node::Leaf { negative: 0, positive: 0 }];
    let mut stack = vec![(0usize, sample)];
    let mut order: Vec<usize> = (0..p).collect();
    while let Some((slot, sample)) = stack.pop() {
        let (neg, pos) = counts(labels, &sample);
        nodes[slot] = Node::Leaf { negative: neg, positive: pos };
        if neg == 0 || pos == 0 || sample.len() < 2 {
            continue;
        }
        // Draw features without replacement until `k` non-constant ones
        // have been evaluated.
        let mut best: Option<Best> = None;
        let mut tried = 0;
        for d in 0..p {
            let swap = rng.random_range(d..p);
            order.swap(d, swap);
            let f = order[d];
            if let Some((impurity, threshold)) = best_threshold(features, labels, &sample, f) {
                tried += 1;
                if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                    best = Some(Best { feature: f, threshold, impurity });
                }
                if tried == k {
                    break;
                }
            }
        }
        let Some(best) = best else { continue };
        let (left, right): (Vec<usize>, Vec<usize>) =
            sample.iter().partition(|&&i| features.row(i)[best.feature] <= best.threshold);
        let l = nodes.len();
        nodes.push(Node::Leaf { negative: 0, positive: 0 });
        nodes.push(Node::Leaf { negative: 0, positive: 0 });
        nodes[slot] = Node::Split { feature: best.feature, threshold: best.threshold, left: l, right: l + 1 };
        stack.push((l + 1, right));
        stack.push((l, left));
    }
    Tree { nodes }
}

pub fn predict_forest(model: &ForestModel, x: &[f64]) -> Result<ForestPrediction> {
    if x.len() != model.n_features {
        return Err(ClassifierError::DimensionMismatch(format!(
            "forest expects {} features, input has {}",
            model.n_features,
            x.len()
        )));
    }
    let votes = model.trees.iter().filter(|t| t.predict(x).is_positive()).count();
    let score = votes as f64 / model.trees.len() as f64;
    let label = if 2 * votes >= model.trees.len() { Label::Positive } else { Label::Negative };
    Ok(ForestPrediction { label, score })
}
