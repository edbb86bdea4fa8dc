use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::label::{class_counts, Label};
use crate::seed::{derive_seed, rng_from, Stream};

use super::{EvaluationError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Kfold,
    RepeatedKfold,
    RepeatedShuffle,
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitStrategy::Kfold => "kfold",
            SplitStrategy::RepeatedKfold => "repeated_kfold",
            SplitStrategy::RepeatedShuffle => "repeated_shuffle",
        })
    }
}

/// Index sets, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub splits: Vec<Split>,
    pub master_seed: u64,
}

fn class_indices(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[usize::from(l.is_positive())].push(i);
    }
    out
}

fn kfold_splits(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Split>> {
    let (neg, pos) = class_counts(labels);
    let minority = neg.min(pos);
    if k < 2 || k > minority {
        return Err(EvaluationError::KTooLarge { k, minority });
    }
    let mut rng = rng_from(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut offset = 0;
    for mut members in class_indices(labels) {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            Split { train, test }
        })
        .collect())
}

/// Stratified k-fold: each class is shuffled and dealt round-robin to the
/// folds, continuing the deal position from one class to the next.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<SplitPlan> {
    Ok(SplitPlan { strategy: SplitStrategy::Kfold, splits: kfold_splits(labels, k, seed)?, master_seed: seed })
}

/// `n_repeats` independent stratified k-fold partitions; repeat `r` is
/// seeded from the outer-split stream at index `r`.
pub fn repeated_stratified_kfold(labels: &[Label], k: usize, n_repeats: usize, seed: u64) -> Result<SplitPlan> {
    if n_repeats == 0 {
        return Err(EvaluationError::InvalidConfig("n_repeats must be at least 1".into()));
    }
    let mut splits = Vec::with_capacity(k * n_repeats);
    for r in 0..n_repeats {
        splits.extend(kfold_splits(labels, k, derive_seed(seed, Stream::OuterSplits, r as u64))?);
    }
    Ok(SplitPlan { strategy: SplitStrategy::RepeatedKfold, splits, master_seed: seed })
}

/// Per-class test counts: each class rounds its own share, then counts move
/// by one (largest remainder first) until they sum to the rounded total.
pub fn stratified_test_counts(class_sizes: [usize; 2], test_fraction: f64) -> Result<[usize; 2]> {
    let n: usize = class_sizes.iter().sum();
    let target = (test_fraction * n as f64).round() as usize;
    let exact = class_sizes.map(|c| test_fraction * c as f64);
    let mut counts = exact.map(|e| e.round() as usize);
    while counts.iter().sum::<usize>() < target {
        let c = (0..2)
            .filter(|&c| counts[c] + 1 < class_sizes[c])
            .max_by(|&a, &b| (exact[a] - counts[a] as f64).total_cmp(&(exact[b] - counts[b] as f64)).then(b.cmp(&a)));
        match c {
            Some(c) => counts[c] += 1,
            None => break,
        }
    }
    while counts.iter().sum::<usize>() > target {
        let c = (0..2)
            .filter(|&c| counts[c] > 1)
            .min_by(|&a, &b| (exact[a] - counts[a] as f64).total_cmp(&(exact[b] - counts[b] as f64)));
        match c {
            Some(c) => counts[c] -= 1,
            None => break,
        }
    }
    for c in 0..2 {
        if counts[c] == 0 || counts[c] >= class_sizes[c] {
            return Err(EvaluationError::DegenerateFraction { fraction: test_fraction, class_size: class_sizes[c] });
        }
    }
    Ok(counts)
}

/// One stratified train/test split; identical for a given
/// `(labels, test_fraction, seed)` whatever else is computed.
pub fn stratified_shuffle_split(labels: &[Label], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EvaluationError::InvalidConfig(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    let classes = class_indices(labels);
    let counts = stratified_test_counts([classes[0].len(), classes[1].len()], test_fraction)?;
    let mut rng = rng_from(seed);
    let mut test = Vec::new();
    let mut train = Vec::new();
    for (mut members, count) in classes.into_iter().zip(counts) {
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..count]);
        train.extend_from_slice(&members[count..]);
    }
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

/// Split `i` is seeded by `derive_seed(seed, OuterSplits, i)`.
pub fn stratified_shuffle_splits(labels: &[Label], n_iterations: usize, test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if n_iterations == 0 {
        return Err(EvaluationError::InvalidConfig("n_iterations must be at least 1".into()));
    }
    let (neg, pos) = class_counts(labels);
    if neg < 2 || pos < 2 {
        return Err(EvaluationError::DegenerateFraction { fraction: test_fraction, class_size: neg.min(pos) });
    }
    let splits = (0..n_iterations)
        .map(|i| stratified_shuffle_split(labels, test_fraction, derive_seed(seed, Stream::OuterSplits, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitPlan { strategy: SplitStrategy::RepeatedShuffle, splits, master_seed: seed })
}

/// Keeps the minority class whole and draws the same number from the
/// majority class without replacement. Sorted ascending.
pub fn balance_classes(labels: &[Label], seed: u64) -> Vec<usize> {
    let [neg, pos] = class_indices(labels);
    let (minority, majority) = if neg.len() <= pos.len() { (neg, pos) } else { (pos, neg) };
    let mut rng = rng_from(derive_seed(seed, Stream::Balance, 0));
    let mut out: Vec<usize> = rand::seq::index::sample(&mut rng, majority.len(), minority.len())
        .into_iter()
        .map(|i| majority[i])
        .collect();
    out.extend(minority);
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(neg: usize, pos: usize) -> Vec<Label> {
        let mut l = vec![Label::Negative; neg];
        l.extend(vec![Label::Positive; pos]);
        l
    }

    fn count_pos(labels: &[Label], idx: &[usize]) -> usize {
        idx.iter().filter(|&&i| labels[i].is_positive()).count()
    }

    #[test]
    fn kfold_examples() {
        let ten = labels(5, 5);
        let plan = stratified_kfold(&ten, 5, 1).unwrap();
        assert_eq!(plan.splits.len(), 5);
        let y = labels(60, 40);
        let plan = stratified_kfold(&y, 5, 3).unwrap();
        for s in &plan.splits {
            assert_eq!(s.test.len(), 20);
            assert_eq!(count_pos(&y, &s.test), 8);
        }
        assert!(matches!(stratified_kfold(&labels(20, 4), 5, 0), Err(EvaluationError::KTooLarge { k: 5, minority: 4 })));
    }

    #[test]
    fn leave_one_out_when_k_equals_n() {
        let y = labels(10, 10);
        let plan = stratified_kfold(&y, 10, 4).unwrap();
        let y10: Vec<Label> = (0..10).map(|i| if i % 2 == 0 { Label::Positive } else { Label::Negative }).collect();
        assert_eq!(stratified_kfold(&y10, 5, 0).unwrap().splits.iter().map(|s| s.test.len()).sum::<usize>(), 10);
        let mut seen = vec![0; 20];
        for s in &plan.splits {
            assert_eq!(s.test.len(), 2);
            for &t in &s.test {
                seen[t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn shuffle_examples() {
        let y = labels(60, 40);
        let plan = stratified_shuffle_splits(&y, 20, 0.3, 5).unwrap();
        for s in &plan.splits {
            assert_eq!(s.test.len(), 30);
            assert_eq!(count_pos(&y, &s.test), 12);
            assert!(s.test.iter().all(|t| s.train.binary_search(t).is_err()));
        }
        assert_eq!(plan, stratified_shuffle_splits(&y, 20, 0.3, 5).unwrap());
        assert_ne!(plan, stratified_shuffle_splits(&y, 20, 0.3, 6).unwrap());
        // Split i does not depend on how many splits are requested.
        let longer = stratified_shuffle_splits(&y, 30, 0.3, 5).unwrap();
        assert_eq!(&longer.splits[..20], &plan.splits[..]);
        assert!(matches!(
            stratified_shuffle_splits(&labels(50, 2), 3, 0.1, 0),
            Err(EvaluationError::DegenerateFraction { .. })
        ));
    }

    #[test]
    fn repeated_kfold_has_k_times_r_splits() {
        let y = labels(12, 9);
        let plan = repeated_stratified_kfold(&y, 3, 4, 8).unwrap();
        assert_eq!(plan.splits.len(), 12);
        assert_ne!(plan.splits[0], plan.splits[3]);
    }

    #[test]
    fn balancing() {
        let y = labels(100, 40);
        let idx = balance_classes(&y, 3);
        assert_eq!(idx.len(), 80);
        assert_eq!(count_pos(&y, &idx), 40);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let even = labels(7, 7);
        assert_eq!(balance_classes(&even, 1), (0..14).collect::<Vec<_>>());
    }

    fn check_plan(y: &[Label], plan: &SplitPlan, fraction: Option<f64>) -> std::result::Result<(), TestCaseError> {
        let n_pos = count_pos(y, &(0..y.len()).collect::<Vec<_>>());
        let n_neg = y.len() - n_pos;
        for s in &plan.splits {
            prop_assert!(s.test.iter().all(|t| s.train.binary_search(t).is_err()));
            prop_assert!(s.train.iter().chain(&s.test).all(|&i| i < y.len()));
            let (tp, tr) = (count_pos(y, &s.test), count_pos(y, &s.train));
            prop_assert!(tp > 0 && tp < s.test.len());
            prop_assert!(tr > 0 && tr < s.train.len());
            let f = fraction.unwrap_or(1.0 / plan.splits.len() as f64);
            prop_assert!((tp as f64 - f * n_pos as f64).abs() <= 1.0 + 1e-9);
            prop_assert!(((s.test.len() - tp) as f64 - f * n_neg as f64).abs() <= 1.0 + 1e-9);
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn plans_are_hygienic(seed in any::<u64>(), neg in 2usize..80, pos in 2usize..80, k in 2usize..8, f in 0.05f64..0.95) {
            let y: Vec<Label> = {
                let mut l = labels(neg, pos);
                l.shuffle(&mut rng_from(seed));
                l
            };
            if k <= neg.min(pos) {
                let plan = stratified_kfold(&y, k, seed).unwrap();
                check_plan(&y, &plan, None)?;
                let mut seen = vec![0; y.len()];
                for s in &plan.splits {
                    for &t in &s.test {
                        seen[t] += 1;
                    }
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
            }
            match stratified_shuffle_splits(&y, 3, f, seed) {
                Ok(plan) => check_plan(&y, &plan, Some(f))?,
                Err(EvaluationError::DegenerateFraction { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
