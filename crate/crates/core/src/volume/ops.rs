use rayon::prelude::*;

use super::{BinaryMask, Grid, Result, Volume3D, VolumeError};

/// Tissue-sum threshold used when none is configured.
pub const DEFAULT_BRAIN_MASK_THRESHOLD: f64 = 0.3;

/// `FWHM = 2 sqrt(2 ln 2) sigma`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Sampled Gaussian truncated at `ceil(4 sigma)` voxels and normalized to sum 1.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

fn convolve_axis(grid: &Grid, input: &[f64], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let radius = (kernel.len() / 2) as i64;
    let stride = [1, nx, nx * ny][axis];
    let extent = grid.dims[axis] as i64;
    let mut out = vec![0.0; input.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis] as i64;
                let center = x + nx * (y + ny * z);
                let lo = (-radius).max(-pos);
                let hi = radius.min(extent - 1 - pos);
                let mut acc = 0.0;
                for k in lo..=hi {
                    let idx = (center as i64 + k * stride as i64) as usize;
                    acc += kernel[(k + radius) as usize] * input[idx];
                }
                slab[x + nx * y] = acc;
            }
        }
    });
    debug_assert_eq!(out.len(), nx * ny * nz);
    out
}

/// Separable Gaussian smoothing with zero padding outside the grid.
///
/// `fwhm_mm == 0` returns an exact copy of the input.
pub fn gaussian_smooth(volume: &Volume3D, fwhm_mm: f64) -> Result<Volume3D> {
    if fwhm_mm.is_nan() || fwhm_mm < 0.0 {
        return Err(VolumeError::NegativeFwhm(fwhm_mm));
    }
    if fwhm_mm == 0.0 {
        return Ok(volume.clone());
    }
    let grid = volume.grid();
    let sigma_mm = fwhm_to_sigma(fwhm_mm);
    let mut data = volume.data().to_vec();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / grid.voxel_size_mm[axis]);
        data = convolve_axis(grid, &data, axis, &kernel);
    }
    Volume3D::new(grid.clone(), data)
}

/// Divides every voxel by the mean intensity inside `reference`.
pub fn suvr_normalize(volume: &Volume3D, reference: &BinaryMask) -> Result<Volume3D> {
    volume.grid().ensure_compatible(reference.grid())?;
    let count = reference.count();
    if count == 0 {
        return Err(VolumeError::EmptyMask);
    }
    let sum: f64 = volume
        .data()
        .iter()
        .zip(reference.included())
        .filter_map(|(v, &inc)| inc.then_some(*v))
        .sum();
    let mean = sum / count as f64;
    if mean.abs() < 1e-12 {
        return Err(VolumeError::ZeroReferenceMean(mean));
    }
    let data = volume.data().iter().map(|v| v / mean).collect();
    Volume3D::new(volume.grid().clone(), data)
}

/// Voxels where `gm + wm + csf > threshold`.
pub fn brain_mask_from_tissues(
    gm: &Volume3D,
    wm: &Volume3D,
    csf: &Volume3D,
    threshold: Option<f64>,
) -> Result<BinaryMask> {
    let threshold = threshold.unwrap_or(DEFAULT_BRAIN_MASK_THRESHOLD);
    if !(threshold > 0.0 && threshold < 3.0) {
        return Err(VolumeError::InvalidThreshold(threshold));
    }
    gm.grid().ensure_compatible(wm.grid())?;
    gm.grid().ensure_compatible(csf.grid())?;
    for tissue in [gm, wm, csf] {
        if let Some((index, &value)) =
            tissue.data().iter().enumerate().find(|(_, &v)| !(-1e-6..=1.5).contains(&v))
        {
            return Err(VolumeError::OutOfRangeProbability { index, value });
        }
    }
    let included = gm
        .data()
        .iter()
        .zip(wm.data())
        .zip(csf.data())
        .map(|((g, w), c)| g + w + c > threshold)
        .collect();
    BinaryMask::new(gm.grid().clone(), included)
}
