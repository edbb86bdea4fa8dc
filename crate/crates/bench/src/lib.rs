//! Input generators shared by the benchmarks.

use adml_core::seed::splitmix64;
use adml_core::{FeatureMatrix, Grid, Label, Volume3D};

/// Uniform values in [-1, 1) from a splitmix64 stream.
pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = splitmix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Two shifted classes of equal size, `n` rows by `p` columns.
pub fn two_class_features(n: usize, p: usize, seed: u64) -> (FeatureMatrix, Vec<Label>) {
    let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Negative } else { Label::Positive }).collect();
    let mut values = uniform(seed, n * p);
    for (i, l) in labels.iter().enumerate() {
        for v in &mut values[i * p..i * p + p.min(10)] {
            *v += 0.3 * l.sign();
        }
    }
    (FeatureMatrix::dense(n, p, values).expect("finite"), labels)
}

pub fn noise_volume(dim: usize, seed: u64) -> Volume3D {
    let grid = Grid::new([dim; 3], [2.0; 3], [0.0; 3]).expect("positive dims");
    Volume3D::new(grid, uniform(seed, dim * dim * dim)).expect("finite")
}
