//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p adml-core --test acceptance` runs all of them;
//! `cargo test -p adml-core --test acceptance -- criterion_9` runs one.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adml_core::classifiers::{
    logreg_gradient, logreg_objective, predict_svm, reconstruct_weights, svm_dual_objective, train_logreg,
    train_svm_dual, Hyperparameters, ModelKind,
};
use adml_core::evaluation::{
    auc, compute_metrics, cross_dataset_eval, default_grid, learning_curve, nested_cv, nested_cv_observed,
    repeated_stratified_kfold, stratified_kfold, stratified_shuffle_splits, CvConfig, Inputs, Metric, OuterStrategy,
    SplitPlan, TrainingObserver,
};
use adml_core::features::{compute_gram, extract_voxel_features, Preprocessing};
use adml_core::report::{
    emit_weight_volume, generate_synthetic_dataset, run_experiment, ExperimentOutput, RunOptions, SyntheticDataset,
    SyntheticSpec,
};
use adml_core::volume::{
    gaussian_smooth, read_labels, read_mask, read_volume, suvr_normalize, write_labels, write_volume,
};
use adml_core::{BinaryMask, FeatureMatrix, Grid, GramMatrix, Label, LabelVolume, Volume3D};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SPEC: SyntheticSpec =
    SyntheticSpec { n_per_class: [100, 100], dims: [16, 16, 16], n_informative: 50, effect_norm: 2.0, seed: 20240 };

/// Bayes balanced accuracy of the synthetic problem: Phi(norm / 2).
fn bayes_balanced_accuracy(effect_norm: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(effect_norm / 2.0)
}

struct Context {
    root: tempfile::TempDir,
    dataset: SyntheticDataset,
    manifest: PathBuf,
    run: ExperimentOutput,
    run_seconds: f64,
    features: FeatureMatrix,
    gram: GramMatrix,
    labels: Vec<Label>,
}

fn image_paths(root: &Path, ids: &[String]) -> Vec<PathBuf> {
    ids.iter().map(|id| root.join(id).join("ses-M00/anat").join(format!("{id}_ses-M00_T1w.nii.gz"))).collect()
}

fn load_features(ds: &SyntheticDataset) -> FeatureMatrix {
    let mask = read_mask(&ds.informative_mask).unwrap();
    let paths = image_paths(&ds.root, &ds.participant_ids);
    extract_voxel_features(ds.participant_ids.clone(), &paths, &mask, &Preprocessing::default()).unwrap()
}

fn synthetic_labels(spec: &SyntheticSpec) -> Vec<Label> {
    let mut labels = vec![Label::Negative; spec.n_per_class[0]];
    labels.extend(vec![Label::Positive; spec.n_per_class[1]]);
    labels
}

fn svm_config(n_iterations: usize) -> CvConfig {
    let mut cfg = CvConfig::new(default_grid(ModelKind::Svm, SPEC.n_informative), 0);
    cfg.outer = OuterStrategy::RepeatedShuffle { n_iterations, test_fraction: 0.3 };
    cfg
}

impl Context {
    fn new() -> Context {
        let root = tempfile::tempdir().unwrap();
        let dataset = generate_synthetic_dataset(&SPEC, &root.path().join("data")).unwrap();
        let manifest = root.path().join("manifest.json");
        let doc = serde_json::json!({
            "dataset_root": "data",
            "task": {"name": "CN_vs_AD", "group_a": {"label": "CN"}, "group_b": {"label": "AD"}},
            "modality": "T1w",
            "features": {"type": "voxel", "mask_path": "data/derivatives/synthetic/mask_informative.nii.gz"},
            "classifier": {"kind": "svm"},
            "validation": {"strategy": "repeated_shuffle", "n_iterations": 250, "test_fraction": 0.3, "inner_k": 10, "seed": 0},
            "output_dir": "out"
        });
        fs::write(&manifest, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        let start = Instant::now();
        let run = run_experiment(&manifest, &RunOptions::default()).unwrap();
        let run_seconds = start.elapsed().as_secs_f64();
        let features = load_features(&dataset);
        let gram = compute_gram(&features);
        let labels = synthetic_labels(&SPEC);
        Context { root, dataset, manifest, run, run_seconds, features, gram, labels }
    }

    fn inputs(&self) -> Inputs<'_> {
        Inputs::Both { features: &self.features, gram: &self.gram }
    }

    fn c1_mean(&self) -> f64 {
        self.run.result.summary.get(Metric::BalancedAccuracy).mean
    }

    fn c1_sd(&self) -> f64 {
        self.run.result.summary.get(Metric::BalancedAccuracy).sd
    }
}

fn criterion_1(ctx: &Context) -> String {
    let ba = ctx.c1_mean();
    let bayes = bayes_balanced_accuracy(SPEC.effect_norm);
    assert!((bayes - 0.8413).abs() < 1e-4, "Bayes oracle {bayes}");
    assert_eq!(ctx.run.result.summary.n_splits, 250);
    assert!((0.79..=0.87).contains(&ba), "mean balanced accuracy {ba}");
    assert!(ctx.run_seconds < 300.0, "run took {:.1}s", ctx.run_seconds);
    format!("mean BA {ba:.4} (SD {:.4}, Bayes {bayes:.4}), run {:.1}s", ctx.c1_sd(), ctx.run_seconds)
}

fn criterion_2(ctx: &Context) -> String {
    let mut permuted = ctx.labels.clone();
    permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
    let result = nested_cv(Inputs::Gram(&ctx.gram), &permuted, ModelKind::Svm, &svm_config(250)).unwrap();
    let ba = result.summary.get(Metric::BalancedAccuracy);
    assert_eq!(result.summary.n_splits, 250);
    assert!((0.45..=0.55).contains(&ba.mean), "permuted mean balanced accuracy {}", ba.mean);
    format!("permuted-label mean BA {:.4} (SD {:.4})", ba.mean, ba.sd)
}

/// Exact minimizer of `1/2 a'Qa - e'a` over `0 <= a <= C`, `y'a = 0` by
/// enumerating which coordinates sit at 0, at C or strictly inside. With a
/// positive definite Q each face has one stationary point.
fn qp_oracle(k: &DMatrix<f64>, y: &[f64], c: f64) -> Vec<f64> {
    let n = y.len();
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * k[(i, j)]);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        if !free.is_empty() {
            let m = free.len();
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = q[(i, j)];
                }
                a[(r, m)] = y[i];
                a[(m, r)] = y[i];
                let fixed: f64 = (0..n).filter(|j| state[*j] != 2).map(|j| q[(i, j)] * alpha[j]).sum();
                rhs[r] = 1.0 - fixed;
            }
            rhs[m] = -(0..n).filter(|j| state[*j] != 2).map(|j| y[j] * alpha[j]).sum::<f64>();
            let Some(sol) = a.lu().solve(&rhs) else { continue };
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r];
            }
            if free.iter().any(|&i| alpha[i] < -1e-12 || alpha[i] > c + 1e-12) {
                continue;
            }
            for &i in &free {
                alpha[i] = alpha[i].clamp(0.0, c);
            }
        }
        if (0..n).map(|i| y[i] * alpha[i]).sum::<f64>().abs() > 1e-9 * (1.0 + c) {
            continue;
        }
        let av = DVector::from_column_slice(&alpha);
        let obj = 0.5 * (av.transpose() * &q * &av)[(0, 0)] - av.sum();
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, alpha));
        }
    }
    best.expect("alpha = 0 is always feasible").1
}

/// Decision-function bias for a dual solution: mean over free vectors, else
/// the midpoint of the interval the bounded vectors allow.
fn oracle_bias(k: &DMatrix<f64>, y: &[f64], alpha: &[f64], c: f64) -> f64 {
    let n = y.len();
    let s: Vec<f64> = (0..n).map(|i| (0..n).map(|j| alpha[j] * y[j] * k[(i, j)]).sum()).collect();
    let tol = 1e-9 * (1.0 + c);
    let free: Vec<usize> = (0..n).filter(|&i| alpha[i] > tol && alpha[i] < c - tol).collect();
    if !free.is_empty() {
        return free.iter().map(|&i| y[i] - s[i]).sum::<f64>() / free.len() as f64;
    }
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..n {
        let at_upper = alpha[i] >= c - tol;
        // y f >= 1 when alpha = 0, y f <= 1 when alpha = C.
        if (y[i] > 0.0) != at_upper {
            lo = lo.max(y[i] - s[i]);
        } else {
            hi = hi.min(y[i] - s[i]);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (lo + hi) / 2.0,
        (true, false) => lo,
        (false, true) => hi,
        _ => 0.0,
    }
}

fn random_svm_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (FeatureMatrix, Vec<Label>, f64) {
    let labels: Vec<Label> = (0..n)
        .map(|i| match i {
            0 => Label::Negative,
            1 => Label::Positive,
            _ if rng.random_bool(0.5) => Label::Positive,
            _ => Label::Negative,
        })
        .collect();
    let shift = rng.random_range(0.0..2.0);
    let values: Vec<f64> = labels
        .iter()
        .flat_map(|l| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            v.into_iter().enumerate().map(move |(j, x)| if j == 0 { x + shift * l.sign() } else { x })
        })
        .collect();
    let c = 10f64.powf(rng.random_range(-2.0..2.0));
    (FeatureMatrix::dense(n, d, values).unwrap(), labels, c)
}

fn check_kkt(gram: &GramMatrix, labels: &[Label], alpha: &[f64], bias: f64, c: f64, tol: f64) {
    let n = labels.len();
    let balance: f64 = alpha.iter().zip(labels).map(|(a, l)| a * l.sign()).sum();
    assert!(balance.abs() <= 1e-10 * (1.0 + c * n as f64), "sum alpha y = {balance}");
    for i in 0..n {
        assert!((0.0..=c).contains(&alpha[i]), "alpha_{i} = {} outside [0, {c}]", alpha[i]);
        let f: f64 = (0..n).map(|j| alpha[j] * labels[j].sign() * gram.get(i, j)).sum::<f64>() + bias;
        let margin = labels[i].sign() * f;
        if alpha[i] == 0.0 {
            assert!(margin >= 1.0 - tol, "alpha_{i} = 0 but y f = {margin}");
        } else if alpha[i] == c {
            assert!(margin <= 1.0 + tol, "alpha_{i} = C but y f = {margin}");
        } else {
            assert!((margin - 1.0).abs() <= tol, "free alpha_{i} but y f = {margin}");
        }
    }
}

fn criterion_3(_: &Context) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap: f64 = 0.0;
    let tol = 1e-3;
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let (x, labels, c) = random_svm_instance(&mut rng, n, 8);
        let gram = compute_gram(&x);
        let model = train_svm_dual(&gram, &labels, c).unwrap();
        assert!(model.converged);
        let k = DMatrix::from_fn(n, n, |i, j| gram.get(i, j));
        let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
        let alpha = qp_oracle(&k, &y, c);
        let oracle_obj = svm_dual_objective(&gram, &labels, &alpha);
        let obj = svm_dual_objective(&gram, &labels, &model.alpha);
        worst_gap = worst_gap.max((oracle_obj - obj).abs());
        assert!((oracle_obj - obj).abs() <= 1e-4, "dual objective {obj} vs oracle {oracle_obj} (n={n}, C={c})");
        let b = oracle_bias(&k, &y, &alpha, c);
        for i in 0..n {
            let oracle_score: f64 = (0..n).map(|j| alpha[j] * y[j] * k[(i, j)]).sum::<f64>() + b;
            let score = predict_svm(&model, gram.row(i)).unwrap();
            assert_eq!(Label::from_score(score), Label::from_score(oracle_score), "prediction {i}: {score} vs {oracle_score}");
        }
        check_kkt(&gram, &labels, &model.alpha, model.bias, c, tol);
    }
    for _ in 0..20 {
        let n = rng.random_range(30..=80);
        let (x, labels, c) = random_svm_instance(&mut rng, n, 20);
        let gram = compute_gram(&x);
        let model = train_svm_dual(&gram, &labels, c).unwrap();
        assert!(model.converged);
        check_kkt(&gram, &labels, &model.alpha, model.bias, c, tol);
    }
    format!("200 small instances, worst objective gap {worst_gap:.2e}; KKT within {tol:e} on 220 instances")
}

fn criterion_4(_: &Context) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_rel: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(5..40);
        let p = rng.random_range(1..10);
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let labels: Vec<Label> =
            (0..n).map(|i| if i % 2 == 0 || rng.random_bool(0.3) { Label::Positive } else { Label::Negative }).collect();
        let values: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = FeatureMatrix::dense(n, p, values).unwrap();
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = rng.random_range(-1.0..1.0);

        let g = logreg_gradient(&x, &labels, c, &w, b);
        assert_eq!(g.len(), p + 1);
        let h = 1e-5;
        let mut num = Vec::with_capacity(p + 1);
        for j in 0..=p {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            let (mut bp, mut bm) = (b, b);
            if j < p {
                wp[j] += h;
                wm[j] -= h;
            } else {
                bp += h;
                bm -= h;
            }
            num.push((logreg_objective(&x, &labels, c, &wp, bp) - logreg_objective(&x, &labels, c, &wm, bm)) / (2.0 * h));
        }
        let diff = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        let rel = diff / scale;
        worst_rel = worst_rel.max(rel);
        assert!(rel < 1e-5, "gradient relative error {rel}");

        let model = train_logreg(&x, &labels, c).unwrap();
        let g = logreg_gradient(&x, &labels, c, &model.weights, model.bias);
        let inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst_grad = worst_grad.max(inf);
        assert!(model.converged && inf <= 1e-6, "converged={} gradient inf-norm {inf}", model.converged);
    }
    format!("worst relative FD error {worst_rel:.2e}, worst converged gradient {worst_grad:.2e}")
}

fn pair_count_auc(truth: &[Label], scores: &[f64]) -> f64 {
    let (mut count, mut pairs) = (0.0, 0usize);
    for (i, ti) in truth.iter().enumerate() {
        for (j, tj) in truth.iter().enumerate() {
            if ti.is_positive() && !tj.is_positive() {
                pairs += 1;
                if scores[i] > scores[j] {
                    count += 1.0;
                } else if scores[i] == scores[j] {
                    count += 0.5;
                }
            }
        }
    }
    count / pairs as f64
}

fn criterion_5(_: &Context) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let levels = rng.random_range(1..20);
        let mut truth: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.4) { Label::Positive } else { Label::Negative }).collect();
        truth[0] = Label::Positive;
        truth[1] = Label::Negative;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0 - 1.0).collect();
        assert_eq!(auc(&truth, &scores).unwrap(), pair_count_auc(&truth, &scores));
        let predicted: Vec<Label> = scores.iter().map(|&s| Label::from_score(s)).collect();
        let m = compute_metrics(&truth, &predicted, &scores).unwrap();
        assert_eq!(m.balanced_accuracy, (m.sensitivity + m.specificity) / 2.0);
        assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / n as f64);
        assert_eq!(m.sensitivity, m.tp as f64 / (m.tp + m.fn_) as f64);
        assert_eq!(m.specificity, m.tn as f64 / (m.tn + m.fp) as f64);
        assert_eq!(m.tp + m.fn_ + m.tn + m.fp, n);
    }
    "100 score sets: AUC equals pair counting exactly; metric identities exact".into()
}

fn check_plan(plan: &SplitPlan, labels: &[Label], expected_test: &dyn Fn(usize) -> f64, partition_every: Option<usize>) {
    let n = labels.len();
    let sizes = [labels.iter().filter(|l| !l.is_positive()).count(), labels.iter().filter(|l| l.is_positive()).count()];
    for (s, split) in plan.splits.iter().enumerate() {
        let mut seen = vec![0u8; n];
        for &i in &split.train {
            seen[i] += 1;
        }
        for &i in &split.test {
            seen[i] += 2;
        }
        assert!(seen.iter().all(|&v| v == 1 || v == 2), "split {s}: not a disjoint cover");
        for (class, positive) in [(0, false), (1, true)] {
            let test = split.test.iter().filter(|&&i| labels[i].is_positive() == positive).count();
            let train = sizes[class] - test;
            assert!(test >= 1 && train >= 1, "split {s}: class {class} missing from train or test");
            let want = expected_test(class);
            assert!((test as f64 - want).abs() <= 1.0 + 1e-9, "split {s}: class {class} has {test} test, expected {want}");
        }
    }
    if let Some(k) = partition_every {
        for chunk in plan.splits.chunks(k) {
            let mut count = vec![0; n];
            for split in chunk {
                for &i in &split.test {
                    count[i] += 1;
                }
            }
            assert!(count.iter().all(|&c| c == 1), "folds of one repeat do not partition the subjects");
        }
    }
}

struct LeakCheck {
    tests: Vec<Vec<bool>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl TrainingObserver for LeakCheck {
    fn on_training(&self, split: usize, rows: &[usize]) {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        assert!(rows.iter().all(|&r| !self.tests[split][r]), "split {split}: a test subject was used for fitting");
    }
}

fn criterion_6(ctx: &Context) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let sizes = [rng.random_range(10..80), rng.random_range(10..80)];
        let mut labels = vec![Label::Negative; sizes[0]];
        labels.extend(vec![Label::Positive; sizes[1]]);
        labels.shuffle(&mut rng);
        let seed = rng.random();
        match case % 3 {
            0 => {
                let k = rng.random_range(2..=10);
                let plan = stratified_kfold(&labels, k, seed).unwrap();
                assert_eq!(plan.splits.len(), k);
                check_plan(&plan, &labels, &|c| sizes[c] as f64 / k as f64, Some(k));
            }
            1 => {
                let k = rng.random_range(2..=5);
                let reps = rng.random_range(1..=4);
                let plan = repeated_stratified_kfold(&labels, k, reps, seed).unwrap();
                assert_eq!(plan.splits.len(), k * reps);
                check_plan(&plan, &labels, &|c| sizes[c] as f64 / k as f64, Some(k));
            }
            _ => {
                let f = rng.random_range(0.1..0.5);
                let plan = stratified_shuffle_splits(&labels, 5, f, seed).unwrap();
                check_plan(&plan, &labels, &|c| sizes[c] as f64 * f, None);
            }
        }
    }

    let cfg = svm_config(250);
    let plan = stratified_shuffle_splits(&ctx.labels, 250, 0.3, cfg.master_seed).unwrap();
    let n = ctx.labels.len();
    let tests: Vec<Vec<bool>> = plan
        .splits
        .iter()
        .map(|s| {
            let mut t = vec![false; n];
            s.test.iter().for_each(|&i| t[i] = true);
            t
        })
        .collect();
    let observer = LeakCheck { tests, calls: Default::default() };
    let result = nested_cv_observed(ctx.inputs(), &ctx.labels, ModelKind::Svm, &cfg, &observer).unwrap();
    for (s, outcome) in result.splits.iter().enumerate() {
        assert_eq!(outcome.test, plan.splits[s].test);
    }
    let mut lr = CvConfig::new(vec![Hyperparameters::LogReg { c: 0.1 }], 1);
    lr.outer = OuterStrategy::RepeatedShuffle { n_iterations: 20, test_fraction: 0.3 };
    lr.standardize = true;
    let plan = stratified_shuffle_splits(&ctx.labels, 20, 0.3, 1).unwrap();
    let lr_observer = LeakCheck {
        tests: plan
            .splits
            .iter()
            .map(|s| {
                let mut t = vec![false; n];
                s.test.iter().for_each(|&i| t[i] = true);
                t
            })
            .collect(),
        calls: Default::default(),
    };
    nested_cv_observed(Inputs::Features(&ctx.features), &ctx.labels, ModelKind::LogReg, &lr, &lr_observer).unwrap();
    let calls = observer.calls.load(std::sync::atomic::Ordering::Relaxed)
        + lr_observer.calls.load(std::sync::atomic::Ordering::Relaxed);
    format!("1000 plans clean; {calls} observed fits over 270 outer splits never touched test subjects")
}

fn criterion_7(ctx: &Context) -> String {
    let files = ["metrics_per_split.tsv", "subject_predictions.tsv", "summary.tsv", "weights.nii.gz"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(ctx.run.dir.join(f)).unwrap()).collect();
    let again = run_experiment(&ctx.manifest, &RunOptions { workers: Some(2) }).unwrap();
    assert_eq!(again.dir, ctx.run.dir);
    for (name, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(again.dir.join(name)).unwrap(), bytes, "{name} differs");
    }
    format!("{} byte-identical across worker counts (default pool vs 2 workers)", files.join(", "))
}

fn criterion_8(ctx: &Context) -> String {
    let dir = ctx.root.path().join("volumes");
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = Grid::new([9, 7, 5], [1.5, 2.0, 2.5], [-10.0, 4.0, 3.0]).unwrap();
    let data: Vec<f64> = (0..grid.n_voxels()).map(|_| rng.random_range(-5.0f32..5.0) as f64).collect();
    let vol = Volume3D::new(grid.clone(), data).unwrap();
    for name in ["v.nii", "v.nii.gz"] {
        write_volume(&vol, dir.join(name)).unwrap();
        assert_eq!(read_volume(dir.join(name)).unwrap(), vol);
    }
    let labels = LabelVolume::new(grid.clone(), (0..grid.n_voxels()).map(|i| (i % 7) as u32).collect()).unwrap();
    write_labels(&labels, dir.join("l.nii.gz")).unwrap();
    assert_eq!(read_labels(dir.join("l.nii.gz")).unwrap(), labels);

    assert_eq!(gaussian_smooth(&vol, 0.0).unwrap().data(), vol.data());

    let g = Grid::new([32, 32, 32], [2.0; 3], [0.0; 3]).unwrap();
    let constant = Volume3D::filled(g.clone(), 3.7).unwrap();
    let fwhm = 6.0;
    let smoothed = gaussian_smooth(&constant, fwhm).unwrap();
    let radius = (4.0 * adml_core::volume::fwhm_to_sigma(fwhm) / 2.0).ceil() as usize;
    let mut worst: f64 = 0.0;
    for i in 0..g.n_voxels() {
        let c = g.coords(i);
        if c.iter().all(|&v| v >= radius && v + radius < 32) {
            worst = worst.max((smoothed.data()[i] - 3.7).abs());
        }
    }
    assert!(worst <= 1e-6, "interior deviation {worst}");

    let g = Grid::new([41, 41, 41], [2.0; 3], [0.0; 3]).unwrap();
    let mut impulse = vec![0.0; g.n_voxels()];
    impulse[g.linear_index(20, 20, 20)] = 5.0;
    let spread = gaussian_smooth(&Volume3D::new(g.clone(), impulse).unwrap(), 8.0).unwrap();
    let mass: f64 = spread.data().iter().sum();
    assert!((mass - 5.0).abs() <= 1e-6, "mass {mass}");

    let positive = Volume3D::new(grid.clone(), vol.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let reference = BinaryMask::new(grid.clone(), (0..grid.n_voxels()).map(|i| i % 3 == 0).collect()).unwrap();
    let once = suvr_normalize(&positive, &reference).unwrap();
    let twice = suvr_normalize(&once, &reference).unwrap();
    let suvr_dev = once.data().iter().zip(twice.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(suvr_dev <= 1e-12, "SUVR not idempotent: {suvr_dev}");
    format!("roundtrips exact; interior deviation {worst:.1e}; mass error {:.1e}; SUVR {suvr_dev:.1e}", (mass - 5.0).abs())
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i + 1;
            while j < idx.len() && v[idx[j]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..j] {
                r[k] = (i + j + 1) as f64 / 2.0;
            }
            i = j;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_9(ctx: &Context) -> String {
    let fractions: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let curve = learning_curve(ctx.inputs(), &ctx.labels, ModelKind::Svm, &svm_config(100), &fractions).unwrap();
    let points: Vec<(f64, f64)> =
        curve.points.iter().filter_map(|p| p.summary.map(|s| (p.fraction, s.mean))).collect();
    assert!(points.len() >= 5, "only {} evaluated fractions", points.len());
    let (fs_, means): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let rho = spearman(&fs_, &means);
    let last = curve.points.last().unwrap();
    assert_eq!(last.fraction, 1.0);
    let full = last.summary.expect("fraction 1.0 evaluated").mean;
    assert!(rho >= 0.8, "Spearman rho {rho}; curve {points:?}");
    assert!((full - ctx.c1_mean()).abs() <= 0.02, "fraction 1.0 mean {full} vs {}", ctx.c1_mean());
    let shape: Vec<String> = points.iter().map(|(f, m)| format!("{f:.1}:{m:.3}")).collect();
    format!("rho {rho:.3} over {} fractions [{}]; full-data {full:.4}", points.len(), shape.join(" "))
}

fn criterion_10(ctx: &Context) -> String {
    let spec = SyntheticSpec { seed: SPEC.seed ^ 0x5eed_5eed, ..SPEC };
    let other = generate_synthetic_dataset(&spec, &ctx.root.path().join("external")).unwrap();
    assert_eq!(other.informative, ctx.dataset.informative);
    let test = load_features(&other);
    let test_labels = synthetic_labels(&spec);
    let result =
        cross_dataset_eval(&ctx.features, &ctx.labels, &test, &test_labels, ModelKind::Svm, &svm_config(250)).unwrap();
    let ba = result.metrics.balanced_accuracy;
    let (mean, sd) = (ctx.c1_mean(), ctx.c1_sd());
    assert_eq!(result.predictions.len(), test.n_subjects());
    assert!((ba - mean).abs() <= 3.0 * sd, "external BA {ba} vs CV {mean} +- 3 x {sd}");
    format!("external BA {ba:.4} (single record) vs CV {mean:.4} +- 3 x {sd:.4}")
}

fn criterion_11(ctx: &Context) -> String {
    let mut worst: f64 = 0.0;
    for c in [1e-3, 1e-1, 10.0] {
        let model = train_svm_dual(&ctx.gram, &ctx.labels, c).unwrap();
        let linear = reconstruct_weights(&model, &ctx.features).unwrap();
        for i in 0..ctx.labels.len() {
            let dual = predict_svm(&model, ctx.gram.row(i)).unwrap();
            let primal = linear.score(ctx.features.row(i)).unwrap();
            worst = worst.max((dual - primal).abs());
            assert!((dual - primal).abs() <= 1e-6, "subject {i}, C={c}: dual {dual} vs primal {primal}");
        }
        let path = ctx.root.path().join(format!("weights-{c}.nii.gz"));
        emit_weight_volume(&linear, ctx.features.descriptor(), None, &path).unwrap();
        let back = read_volume(&path).unwrap();
        for (k, &idx) in ctx.dataset.informative.iter().enumerate() {
            let w = linear.weights[k];
            assert_eq!(back.data()[idx], w as f32 as f64, "voxel {idx}");
            assert!((back.data()[idx] - w).abs() <= f32::EPSILON as f64 * w.abs());
        }
    }
    let emitted = read_volume(ctx.run.dir.join("weights.nii.gz")).unwrap();
    let model = ctx.run.result.averaged_model.as_ref().unwrap();
    for (k, &idx) in ctx.dataset.informative.iter().enumerate() {
        assert_eq!(emitted.data()[idx], model.weights[k] as f32 as f64);
    }
    format!("worst dual/primal score gap {worst:.2e}; weight volumes roundtrip at float32 precision")
}

type Criterion = fn(&Context) -> String;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, Criterion); 11] = [
        ("criterion_1", "synthetic fidelity", criterion_1),
        ("criterion_2", "null calibration", criterion_2),
        ("criterion_3", "SVM dual oracle and KKT", criterion_3),
        ("criterion_4", "logistic gradient", criterion_4),
        ("criterion_5", "AUC oracle and metric identities", criterion_5),
        ("criterion_6", "split hygiene and no leakage", criterion_6),
        ("criterion_7", "determinism across worker counts", criterion_7),
        ("criterion_8", "volume operations", criterion_8),
        ("criterion_9", "learning curve", criterion_9),
        ("criterion_10", "cross-dataset protocol", criterion_10),
        ("criterion_11", "primal-dual identity", criterion_11),
    ];
    let selected: Vec<_> =
        criteria.iter().filter(|(id, _, _)| filters.is_empty() || filters.iter().any(|f| id == f)).collect();
    if selected.is_empty() {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let setup = Instant::now();
    let ctx = Context::new();
    println!("acceptance setup (dataset + reference run): {:.1}s", setup.elapsed().as_secs_f64());
    let mut failures = 0;
    for (id, name, check) in selected {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| check(&ctx)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} ({name}): {detail} [{secs:.1}s]"),
            Err(e) => {
                failures += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL {id} ({name}): {msg} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
