//! Feature matrices (voxel-wise or atlas-regional) and linear-kernel Gram
//! matrices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::volume::{self, BinaryMask, Grid, LabelVolume, Volume3D, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature mask has no included voxel")]
    EmptyMask,
    #[error("region {0} has no voxel")]
    EmptyRegion(u32),
    #[error("{context}: grid mismatch ({detail})")]
    GridMismatch { context: String, detail: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite feature value for subject {subject}, feature {feature}")]
    NonFinite { subject: usize, feature: usize },
    #[error("reading {path}: {source}")]
    Volume {
        path: PathBuf,
        #[source]
        source: VolumeError,
    },
    #[error("preprocessing subject {subject}: {source}")]
    Preprocess {
        subject: String,
        #[source]
        source: VolumeError,
    },
    #[error("Gram cache {path}: {detail}")]
    Cache { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

fn grid_bytes(grid: &Grid, hasher: &mut Sha256) {
    for d in grid.dims {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in grid.voxel_size_mm.iter().chain(grid.affine.iter().flatten()) {
        hasher.update(v.to_le_bytes());
    }
}

/// Masked voxels, ascending linear index in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelIndexMap {
    grid: Grid,
    indices: Vec<usize>,
    hash: String,
}

impl VoxelIndexMap {
    pub fn from_mask(mask: &BinaryMask) -> Result<Self> {
        let indices = mask.indices();
        if indices.is_empty() {
            return Err(FeatureError::EmptyMask);
        }
        let mut hasher = Sha256::new();
        hasher.update(b"voxels");
        grid_bytes(mask.grid(), &mut hasher);
        for &i in &indices {
            hasher.update((i as u64).to_le_bytes());
        }
        Ok(VoxelIndexMap { grid: mask.grid().clone(), indices, hash: hex::encode(hasher.finalize()) })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Atlas regions in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionList {
    grid: Grid,
    ids: Vec<u32>,
    names: Option<Vec<String>>,
    voxel_counts: Vec<usize>,
    hash: String,
}

impl RegionList {
    /// Every nonzero label of the atlas, or the requested subset.
    pub fn from_atlas(atlas: &LabelVolume, requested: Option<&[u32]>) -> Result<Self> {
        let ids = match requested {
            Some(r) => {
                let mut ids = r.to_vec();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != r.len() {
                    return Err(FeatureError::DimensionMismatch("duplicate region id requested".into()));
                }
                ids
            }
            None => atlas.region_ids(),
        };
        if let Some(&zero) = ids.iter().find(|&&id| id == 0) {
            return Err(FeatureError::EmptyRegion(zero));
        }
        let max = ids.last().copied().unwrap_or(0) as usize;
        let mut counts = vec![0usize; max + 1];
        for &l in atlas.labels() {
            if (l as usize) <= max {
                counts[l as usize] += 1;
            }
        }
        let voxel_counts: Vec<usize> = ids.iter().map(|&id| counts[id as usize]).collect();
        if let Some(pos) = voxel_counts.iter().position(|&c| c == 0) {
            return Err(FeatureError::EmptyRegion(ids[pos]));
        }
        let mut hasher = Sha256::new();
        hasher.update(b"regions");
        grid_bytes(atlas.grid(), &mut hasher);
        for &l in atlas.labels() {
            hasher.update(l.to_le_bytes());
        }
        for &id in &ids {
            hasher.update(id.to_le_bytes());
        }
        Ok(RegionList { grid: atlas.grid().clone(), ids, names: None, voxel_counts, hash: hex::encode(hasher.finalize()) })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ids.len() {
            return Err(FeatureError::DimensionMismatch(format!(
                "{} names for {} regions",
                names.len(),
                self.ids.len()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn voxel_counts(&self) -> &[usize] {
        &self.voxel_counts
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureDescriptor {
    Voxels(VoxelIndexMap),
    Regions(RegionList),
}

impl FeatureDescriptor {
    pub fn len(&self) -> usize {
        match self {
            FeatureDescriptor::Voxels(v) => v.indices.len(),
            FeatureDescriptor::Regions(r) => r.ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Content hash of the mask or atlas (plus region selection).
    pub fn content_hash(&self) -> &str {
        match self {
            FeatureDescriptor::Voxels(v) => &v.hash,
            FeatureDescriptor::Regions(r) => &r.hash,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            FeatureDescriptor::Voxels(v) => &v.grid,
            FeatureDescriptor::Regions(r) => &r.grid,
        }
    }
}

/// Subjects x features, row major, rows aligned with `subject_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n_subjects: usize,
    n_features: usize,
    values: Vec<f64>,
    subject_ids: Vec<String>,
    descriptor: FeatureDescriptor,
}

impl FeatureMatrix {
    pub fn new(subject_ids: Vec<String>, values: Vec<f64>, descriptor: FeatureDescriptor) -> Result<Self> {
        let n_subjects = subject_ids.len();
        let n_features = descriptor.len();
        if values.len() != n_subjects * n_features {
            return Err(FeatureError::DimensionMismatch(format!(
                "{} values for {n_subjects} subjects x {n_features} features",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { subject: pos / n_features.max(1), feature: pos % n_features.max(1) });
        }
        Ok(FeatureMatrix { n_subjects, n_features, values, subject_ids, descriptor })
    }

    /// Plain matrix without imaging provenance: a voxel descriptor over a
    /// `p x 1 x 1` grid with unit spacing. Subjects are named `row-<i>`.
    pub fn dense(n_subjects: usize, n_features: usize, values: Vec<f64>) -> Result<Self> {
        if n_features == 0 {
            return Err(FeatureError::EmptyMask);
        }
        let grid = Grid::new([n_features, 1, 1], [1.0; 3], [0.0; 3])
            .map_err(|e| FeatureError::DimensionMismatch(e.to_string()))?;
        let mask = BinaryMask::new(grid, vec![true; n_features])
            .map_err(|e| FeatureError::DimensionMismatch(e.to_string()))?;
        let descriptor = FeatureDescriptor::Voxels(VoxelIndexMap::from_mask(&mask)?);
        let ids = (0..n_subjects).map(|i| format!("row-{i}")).collect();
        FeatureMatrix::new(ids, values, descriptor)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.descriptor
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_subjects: indices.len(),
            n_features: self.n_features,
            values,
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            descriptor: self.descriptor.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.n_features != other.n_features {
            return Err(FeatureError::DimensionMismatch(format!(
                "{} vs {} features",
                self.n_features, other.n_features
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut ids = self.subject_ids.clone();
        ids.extend(other.subject_ids.iter().cloned());
        Ok(FeatureMatrix {
            n_subjects: self.n_subjects + other.n_subjects,
            n_features: self.n_features,
            values,
            subject_ids: ids,
            descriptor: self.descriptor.clone(),
        })
    }

    /// SHA-256 over shape, values and descriptor hash.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.n_subjects as u64).to_le_bytes());
        hasher.update((self.n_features as u64).to_le_bytes());
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.descriptor.content_hash().as_bytes());
        hasher.finalize().into()
    }
}

/// Per-volume preprocessing applied before extraction: SUVR normalization
/// (when a reference mask is given) followed by Gaussian smoothing.
#[derive(Clone, Debug, Default)]
pub struct Preprocessing {
    pub fwhm_mm: f64,
    pub suvr_reference: Option<BinaryMask>,
}

impl Preprocessing {
    pub fn apply(&self, volume: Volume3D) -> std::result::Result<Volume3D, VolumeError> {
        let volume = match &self.suvr_reference {
            Some(reference) => volume::suvr_normalize(&volume, reference)?,
            None => volume,
        };
        volume::gaussian_smooth(&volume, self.fwhm_mm)
    }
}

fn check_grid(context: &str, expected: &Grid, actual: &Grid) -> Result<()> {
    expected.ensure_compatible(actual).map_err(|e| FeatureError::GridMismatch {
        context: context.to_string(),
        detail: e.to_string(),
    })
}

fn check_subjects(subject_ids: &[String], n: usize) -> Result<()> {
    if subject_ids.len() != n {
        return Err(FeatureError::DimensionMismatch(format!("{} subject ids for {n} volumes", subject_ids.len())));
    }
    Ok(())
}

fn voxel_row(volume: &Volume3D, map: &VoxelIndexMap, subject: &str) -> Result<Vec<f64>> {
    check_grid(subject, &map.grid, volume.grid())?;
    Ok(map.indices.iter().map(|&i| volume.data()[i]).collect())
}

fn region_row(volume: &Volume3D, atlas: &LabelVolume, regions: &RegionList, subject: &str) -> Result<Vec<f64>> {
    check_grid(subject, atlas.grid(), volume.grid())?;
    let max = *regions.ids.last().unwrap() as usize;
    let mut slot = vec![usize::MAX; max + 1];
    for (k, &id) in regions.ids.iter().enumerate() {
        slot[id as usize] = k;
    }
    let mut sums = vec![0.0; regions.ids.len()];
    for (&label, &v) in atlas.labels().iter().zip(volume.data()) {
        if label != 0 && (label as usize) <= max {
            let k = slot[label as usize];
            if k != usize::MAX {
                sums[k] += v;
            }
        }
    }
    Ok(sums.iter().zip(&regions.voxel_counts).map(|(s, &c)| s / c as f64).collect())
}

fn assemble(subject_ids: Vec<String>, rows: Vec<Vec<f64>>, descriptor: FeatureDescriptor) -> Result<FeatureMatrix> {
    FeatureMatrix::new(subject_ids, rows.concat(), descriptor)
}

/// Values of each subject's volume at the masked voxels.
pub fn voxel_features_from_volumes(
    subject_ids: Vec<String>,
    volumes: &[Volume3D],
    mask: &BinaryMask,
) -> Result<FeatureMatrix> {
    check_subjects(&subject_ids, volumes.len())?;
    let map = VoxelIndexMap::from_mask(mask)?;
    let rows = volumes
        .iter()
        .zip(&subject_ids)
        .map(|(v, id)| voxel_row(v, &map, id))
        .collect::<Result<Vec<_>>>()?;
    assemble(subject_ids, rows, FeatureDescriptor::Voxels(map))
}

/// Mean of each region; background label 0 never contributes.
pub fn regional_features_from_volumes(
    subject_ids: Vec<String>,
    volumes: &[Volume3D],
    atlas: &LabelVolume,
    regions: Option<&[u32]>,
) -> Result<FeatureMatrix> {
    check_subjects(&subject_ids, volumes.len())?;
    let list = RegionList::from_atlas(atlas, regions)?;
    let rows = volumes
        .iter()
        .zip(&subject_ids)
        .map(|(v, id)| region_row(v, atlas, &list, id))
        .collect::<Result<Vec<_>>>()?;
    assemble(subject_ids, rows, FeatureDescriptor::Regions(list))
}

fn load(path: &Path, subject: &str, preprocessing: &Preprocessing) -> Result<Volume3D> {
    let vol = volume::read_volume(path).map_err(|source| FeatureError::Volume { path: path.to_path_buf(), source })?;
    preprocessing
        .apply(vol)
        .map_err(|source| FeatureError::Preprocess { subject: subject.to_string(), source })
}

/// Reads, preprocesses and masks each subject's volume. Subjects are
/// processed in parallel; row order follows `subject_ids`.
pub fn extract_voxel_features(
    subject_ids: Vec<String>,
    volume_paths: &[PathBuf],
    mask: &BinaryMask,
    preprocessing: &Preprocessing,
) -> Result<FeatureMatrix> {
    check_subjects(&subject_ids, volume_paths.len())?;
    let map = VoxelIndexMap::from_mask(mask)?;
    let rows = volume_paths
        .par_iter()
        .zip(subject_ids.par_iter())
        .map(|(path, id)| voxel_row(&load(path, id, preprocessing)?, &map, id))
        .collect::<Result<Vec<_>>>()?;
    assemble(subject_ids, rows, FeatureDescriptor::Voxels(map))
}

pub fn extract_regional_features(
    subject_ids: Vec<String>,
    volume_paths: &[PathBuf],
    atlas: &LabelVolume,
    regions: Option<&[u32]>,
    preprocessing: &Preprocessing,
) -> Result<FeatureMatrix> {
    check_subjects(&subject_ids, volume_paths.len())?;
    let list = RegionList::from_atlas(atlas, regions)?;
    let rows = volume_paths
        .par_iter()
        .zip(subject_ids.par_iter())
        .map(|(path, id)| region_row(&load(path, id, preprocessing)?, atlas, &list, id))
        .collect::<Result<Vec<_>>>()?;
    assemble(subject_ids, rows, FeatureDescriptor::Regions(list))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric n x n linear-kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    /// Checks shape, finiteness and symmetry (within 1e-10).
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(FeatureError::DimensionMismatch(format!("{} values for a {n}x{n} Gram", values.len())));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { subject: pos / n, feature: pos % n });
        }
        for i in 0..n {
            for j in 0..i {
                if (values[i * n + j] - values[j * n + i]).abs() > 1e-10 {
                    return Err(FeatureError::DimensionMismatch(format!("Gram not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Principal submatrix on `indices`.
    pub fn submatrix(&self, indices: &[usize]) -> GramMatrix {
        let values = indices.iter().flat_map(|&i| indices.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        GramMatrix { n: indices.len(), values }
    }

    /// Rectangular block `K[rows][cols]`.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> CrossKernel {
        let values = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        CrossKernel { n_test: rows.len(), n_train: cols.len(), values }
    }
}

/// Test-by-train kernel block: `values[t * n_train + i] = <test_t, train_i>`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossKernel {
    n_test: usize,
    n_train: usize,
    values: Vec<f64>,
}

impl CrossKernel {
    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_train..(t + 1) * self.n_train]
    }
}

/// `K[i][j] = <x_i, x_j>`, computed in parallel by row.
pub fn compute_gram(features: &FeatureMatrix) -> GramMatrix {
    let n = features.n_subjects();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(features.row(i), features.row(j))).collect())
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (offset, &v) in row.iter().enumerate() {
            let j = i + offset;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    GramMatrix { n, values }
}

pub fn cross_gram(train: &FeatureMatrix, test: &FeatureMatrix) -> Result<CrossKernel> {
    if train.n_features() != test.n_features() {
        return Err(FeatureError::DimensionMismatch(format!(
            "train has {} features, test has {}",
            train.n_features(),
            test.n_features()
        )));
    }
    let values: Vec<f64> = (0..test.n_subjects())
        .into_par_iter()
        .flat_map_iter(|t| (0..train.n_subjects()).map(move |i| dot(test.row(t), train.row(i))))
        .collect();
    Ok(CrossKernel { n_test: test.n_subjects(), n_train: train.n_subjects(), values })
}

const GRAM_MAGIC: &[u8; 5] = b"GRAM1";

/// Cache layout: `GRAM1`, n as u64 LE, n*n f64 LE, 32-byte input hash.
pub fn write_gram_cache(path: &Path, gram: &GramMatrix, input_hash: &[u8; 32]) -> Result<()> {
    let cache_err = |e: std::io::Error| FeatureError::Cache { path: path.to_path_buf(), detail: e.to_string() };
    let mut bytes = Vec::with_capacity(5 + 8 + 8 * gram.values.len() + 32);
    bytes.extend_from_slice(GRAM_MAGIC);
    bytes.extend_from_slice(&(gram.n as u64).to_le_bytes());
    for v in &gram.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(input_hash);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(cache_err)?;
    }
    let mut file = fs::File::create(path).map_err(cache_err)?;
    file.write_all(&bytes).map_err(cache_err)
}

/// Returns `None` when the file is absent or was built from other inputs.
pub fn read_gram_cache(path: &Path, expected_hash: &[u8; 32]) -> Result<Option<GramMatrix>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(FeatureError::Cache { path: path.to_path_buf(), detail: e.to_string() }),
    };
    let corrupt = |detail: &str| FeatureError::Cache { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 5 + 8 + 32 || &bytes[..5] != GRAM_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let n = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let expected_len = n.checked_mul(n).and_then(|nn| nn.checked_mul(8)).map(|b| b + 13 + 32);
    if expected_len != Some(bytes.len()) {
        return Err(corrupt("length does not match header"));
    }
    if &bytes[bytes.len() - 32..] != expected_hash {
        return Ok(None);
    }
    let values = bytes[13..bytes.len() - 32]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GramMatrix::from_values(n, values).map(Some)
}

/// Per-feature z-scoring fitted on training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population SD over `rows`; zero-variance features keep scale 1.
    pub fn fit(features: &FeatureMatrix, rows: &[usize]) -> Self {
        let p = features.n_features();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        }).collect();
        Standardizer { mean, scale }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Standardized copy of `rows`.
    pub fn transform(&self, features: &FeatureMatrix, rows: &[usize]) -> FeatureMatrix {
        let values = rows.iter().flat_map(|&r| self.transform_row(features.row(r))).collect();
        FeatureMatrix {
            n_subjects: rows.len(),
            n_features: features.n_features(),
            values,
            subject_ids: rows.iter().map(|&r| features.subject_ids()[r].clone()).collect(),
            descriptor: features.descriptor().clone(),
        }
    }

    /// Maps weights learned on standardized inputs back to raw inputs:
    /// `w_raw = w / scale`, `b_raw = b - sum(w * mean / scale)`.
    pub fn unstandardize(&self, weights: &[f64], bias: f64) -> (Vec<f64>, f64) {
        let raw: Vec<f64> = weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let shift: f64 = raw.iter().zip(&self.mean).map(|(w, m)| w * m).sum();
        (raw, bias - shift)
    }
}
