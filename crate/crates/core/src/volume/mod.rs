//! Registered 3D volumes: scalar maps, atlas labels and binary masks.
//!
//! All grids store voxels in x-fastest order, i.e. the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod nifti;
mod ops;

use std::path::PathBuf;

pub use nifti::{
    read_header, read_labels, read_mask, read_nifti, read_volume, write_labels, write_volume,
    NiftiHeaderInfo, NiftiImage,
};
pub use ops::{
    brain_mask_from_tissues, gaussian_kernel, gaussian_smooth, suvr_normalize, fwhm_to_sigma,
    DEFAULT_BRAIN_MASK_THRESHOLD,
};

/// Absolute tolerance on affine entries when deciding whether two grids match.
pub const AFFINE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("{path}: not a NIfTI-1 single file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: expected a 3D image, found dim[0] = {ndim} with dims {dims:?}")]
    NotThreeDimensional { path: PathBuf, ndim: i16, dims: Vec<i16> },
    #[error("{path}: big-endian NIfTI files are not supported")]
    BigEndian { path: PathBuf },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: label volume contains non-integer or negative value {value}")]
    NotALabel { path: PathBuf, value: f64 },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("volume contains a non-finite value at voxel {index}")]
    NonFinite { index: usize },
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("negative FWHM {0} mm")]
    NegativeFwhm(f64),
    #[error("reference region mean {0} is too close to zero")]
    ZeroReferenceMean(f64),
    #[error("reference mask is empty")]
    EmptyMask,
    #[error("tissue probability {value} at voxel {index} is outside [-1e-6, 1.5]")]
    OutOfRangeProbability { index: usize, value: f64 },
    #[error("brain mask threshold {0} must lie in (0, 3)")]
    InvalidThreshold(f64),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Geometry shared by every volume kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// Voxel-to-world transform, row major. Last row is `(0, 0, 0, 1)`.
    pub affine: [[f64; 4]; 4],
}

impl Grid {
    /// Grid with a diagonal affine built from the voxel sizes and the given origin.
    pub fn new(dims: [usize; 3], voxel_size_mm: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for axis in 0..3 {
            affine[axis][axis] = voxel_size_mm[axis];
            affine[axis][3] = origin[axis];
        }
        affine[3][3] = 1.0;
        Self::with_affine(dims, voxel_size_mm, affine)
    }

    pub fn with_affine(
        dims: [usize; 3],
        voxel_size_mm: [f64; 3],
        affine: [[f64; 4]; 4],
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if voxel_size_mm.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(VolumeError::Invalid(format!(
                "voxel sizes must be positive, got {voxel_size_mm:?}"
            )));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::Invalid("affine last row must be (0, 0, 0, 1)".into()));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("affine contains non-finite entries".into()));
        }
        Ok(Grid { dims, voxel_size_mm, affine })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Identical dims and voxel sizes, affines equal within [`AFFINE_TOLERANCE`].
    pub fn is_compatible(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self.voxel_size_mm == other.voxel_size_mm
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= AFFINE_TOLERANCE)
    }

    pub fn ensure_compatible(&self, other: &Grid) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(format!(
                "dims {:?} / {:?}, voxel sizes {:?} / {:?}",
                self.dims, other.dims, self.voxel_size_mm, other.voxel_size_mm
            )))
        }
    }
}

/// Scalar volume. Values are stored as `f64` whatever the on-disk type.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_voxels() {
            return Err(VolumeError::Invalid(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                grid.n_voxels()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Volume3D { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        let n = grid.n_voxels();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.linear_index(x, y, z)]
    }
}

/// Atlas parcellation; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.n_voxels() {
            return Err(VolumeError::Invalid(format!(
                "label length {} does not match grid of {} voxels",
                labels.len(),
                grid.n_voxels()
            )));
        }
        if labels.iter().all(|&l| l == 0) {
            return Err(VolumeError::Invalid("atlas has no nonzero label".into()));
        }
        Ok(LabelVolume { grid, labels })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct nonzero labels in ascending order.
    pub fn region_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    grid: Grid,
    included: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: Grid, included: Vec<bool>) -> Result<Self> {
        if included.len() != grid.n_voxels() {
            return Err(VolumeError::Invalid(format!(
                "mask length {} does not match grid of {} voxels",
                included.len(),
                grid.n_voxels()
            )));
        }
        Ok(BinaryMask { grid, included })
    }

    /// Nonzero voxels of `volume` are included.
    pub fn from_volume(volume: &Volume3D) -> Self {
        BinaryMask {
            grid: volume.grid.clone(),
            included: volume.data.iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// Linear indices of included voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.included
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            grid: self.grid.clone(),
            data: self.included.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
