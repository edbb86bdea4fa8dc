//! Line-oriented text format for trained models.
//!
//! ```text
//! adml-model 1
//! kind linear|logreg|svm|forest
//! <key> <value>        header lines, model specific
//! <array name> <len>   followed by one entry per line
//! ```
//!
//! Reals use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;

use crate::label::Label;

use super::{ClassifierError, ForestModel, LinearModel, LogRegModel, Node, Result, SvmDualModel, Tree};

const MAGIC: &str = "adml-model 1";

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    LogReg(LogRegModel),
    Svm(SvmDualModel),
    Forest(ForestModel),
}

impl Model {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        match self {
            Model::Linear(m) => {
                let _ = writeln!(out, "kind linear\nbias {}\nweights {}", m.bias, m.weights.len());
                m.weights.iter().for_each(|w| {
                    let _ = writeln!(out, "{w}");
                });
            }
            Model::LogReg(m) => {
                let _ = writeln!(
                    out,
                    "kind logreg\nC {}\nbias {}\nconverged {}\niterations {}\ngradient_norm {}\nweights {}",
                    m.c,
                    m.bias,
                    m.converged,
                    m.iterations,
                    m.gradient_norm,
                    m.weights.len()
                );
                m.weights.iter().for_each(|w| {
                    let _ = writeln!(out, "{w}");
                });
            }
            Model::Svm(m) => {
                let _ = writeln!(
                    out,
                    "kind svm\nC {}\nbias {}\nconverged {}\niterations {}\nviolation {}\nalpha_label {}",
                    m.c,
                    m.bias,
                    m.converged,
                    m.iterations,
                    m.violation,
                    m.alpha.len()
                );
                for (a, y) in m.alpha.iter().zip(&m.train_labels) {
                    let _ = writeln!(out, "{a} {y}");
                }
            }
            Model::Forest(m) => {
                let _ = writeln!(
                    out,
                    "kind forest\nn_features {}\nmax_features {}\nseed {}\ntrees {}",
                    m.n_features,
                    m.max_features,
                    m.seed,
                    m.trees.len()
                );
                for tree in &m.trees {
                    let _ = writeln!(out, "nodes {}", tree.nodes.len());
                    for node in &tree.nodes {
                        let _ = match node {
                            Node::Split { feature, threshold, left, right } => {
                                writeln!(out, "split {feature} {threshold} {left} {right}")
                            }
                            Node::Leaf { negative, positive } => writeln!(out, "leaf {negative} {positive}"),
                        };
                    }
                }
            }
        }
        out
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| ClassifierError::Parse("unexpected end of input".into()))
    }

    fn key(&mut self, key: &str) -> Result<&'a str> {
        let (n, line) = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(ClassifierError::Parse(format!("line {n}: expected `{key} <value>`, found `{line}`"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.key(key)?;
        v.parse().map_err(|_| ClassifierError::Parse(format!("invalid value `{v}` for `{key}`")))
    }

    fn reals(&mut self, key: &str) -> Result<Vec<f64>> {
        let n: usize = self.parsed(key)?;
        (0..n)
            .map(|_| {
                let (i, line) = self.next_line()?;
                line.parse().map_err(|_| ClassifierError::Parse(format!("line {i}: invalid number `{line}`")))
            })
            .collect()
    }
}

fn fields<'a, const N: usize>(line: &'a str, lineno: usize) -> Result<[&'a str; N]> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    parts.try_into().map_err(|_| ClassifierError::Parse(format!("line {lineno}: expected {N} fields in `{line}`")))
}

fn num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T> {
    s.parse().map_err(|_| ClassifierError::Parse(format!("line {lineno}: invalid number `{s}`")))
}

pub fn parse_model(text: &str) -> Result<Model> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    let (_, first) = lines.next_line()?;
    if first != MAGIC {
        return Err(ClassifierError::Parse(format!("expected `{MAGIC}` header")));
    }
    let model = match lines.key("kind")? {
        "linear" => {
            let bias = lines.parsed("bias")?;
            let weights = lines.reals("weights")?;
            Model::Linear(LinearModel::new(weights, bias)?)
        }
        "logreg" => {
            let c = lines.parsed("C")?;
            let bias = lines.parsed("bias")?;
            let converged = lines.parsed("converged")?;
            let iterations = lines.parsed("iterations")?;
            let gradient_norm = lines.parsed("gradient_norm")?;
            let weights = lines.reals("weights")?;
            Model::LogReg(LogRegModel { weights, bias, c, converged, iterations, gradient_norm })
        }
        "svm" => {
            let c = lines.parsed("C")?;
            let bias = lines.parsed("bias")?;
            let converged = lines.parsed("converged")?;
            let iterations = lines.parsed("iterations")?;
            let violation = lines.parsed("violation")?;
            let n: usize = lines.parsed("alpha_label")?;
            let mut alpha = Vec::with_capacity(n);
            let mut train_labels = Vec::with_capacity(n);
            for _ in 0..n {
                let (i, line) = lines.next_line()?;
                let [a, y] = fields::<2>(line, i)?;
                alpha.push(num::<f64>(a, i)?);
                let y: i8 = num(y, i)?;
                train_labels.push(Label::try_from(y).map_err(|e| ClassifierError::Parse(format!("line {i}: {e}")))?);
            }
            let support_indices = (0..n).filter(|&i| alpha[i] > 0.0).collect();
            Model::Svm(SvmDualModel { alpha, train_labels, bias, c, support_indices, converged, iterations, violation })
        }
        "forest" => {
            let n_features = lines.parsed("n_features")?;
            let max_features = lines.parsed("max_features")?;
            let seed = lines.parsed("seed")?;
            let n_trees: usize = lines.parsed("trees")?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let n_nodes: usize = lines.parsed("nodes")?;
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    let (i, line) = lines.next_line()?;
                    let node = if line.starts_with("split ") {
                        let [_, f, t, l, r] = fields::<5>(line, i)?;
                        Node::Split { feature: num(f, i)?, threshold: num(t, i)?, left: num(l, i)?, right: num(r, i)? }
                    } else {
                        let [tag, neg, pos] = fields::<3>(line, i)?;
                        if tag != "leaf" {
                            return Err(ClassifierError::Parse(format!("line {i}: unknown node `{line}`")));
                        }
                        Node::Leaf { negative: num(neg, i)?, positive: num(pos, i)? }
                    };
                    if let Node::Split { feature, left, right, .. } = node {
                        if feature >= n_features || left >= n_nodes || right >= n_nodes {
                            return Err(ClassifierError::Parse(format!("line {i}: node index out of range")));
                        }
                    }
                    nodes.push(node);
                }
                trees.push(Tree { nodes });
            }
            if trees.is_empty() {
                return Err(ClassifierError::Parse("forest without trees".into()));
            }
            Model::Forest(ForestModel { n_trees: trees.len(), trees, max_features, seed, n_features })
        }
        other => return Err(ClassifierError::Parse(format!("unknown model kind `{other}`"))),
    };
    if let Some((i, line)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(ClassifierError::Parse(format!("line {}: trailing content `{line}`", i + 1)));
    }
    Ok(model)
}
