use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{PARTICIPANT_COLUMNS, SESSION_COLUMNS};
use crate::seed::{derive_seed, rng_from, Stream};
use crate::volume::{write_labels, write_volume, BinaryMask, Grid, LabelVolume, Volume3D};

use super::emit::write_tsv;
use super::{io_err, ReportError, Result};

/// Two Gaussian classes on a voxel grid. Noise is standard normal at every
/// voxel; class +1 adds a constant shift on the informative voxels so that
/// the class-mean difference has Euclidean norm `effect_norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// (class -1, class +1) sizes.
    pub n_per_class: [usize; 2],
    pub dims: [usize; 3],
    pub n_informative: usize,
    pub effect_norm: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ReportError::SpecInvalid(m));
        if self.n_per_class.contains(&0) {
            return bad("both classes need at least one subject".into());
        }
        if self.dims.contains(&0) {
            return bad(format!("grid dims {:?} must be positive", self.dims));
        }
        let total: usize = self.dims.iter().product();
        if self.n_informative > total {
            return bad(format!("{} informative voxels exceed the {total} voxels of the grid", self.n_informative));
        }
        if !(self.effect_norm.is_finite() && self.effect_norm >= 0.0) {
            return bad(format!("effect norm must be finite and >= 0, got {}", self.effect_norm));
        }
        if self.n_informative == 0 && self.effect_norm > 0.0 {
            return bad("a nonzero effect needs at least one informative voxel".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.dims, [2.0; 3], [0.0; 3]).expect("positive dims")
    }

    /// The `n_informative` voxels closest to the grid center, ties broken by
    /// linear index, in ascending index order.
    pub fn informative_indices(&self) -> Vec<usize> {
        let grid = self.grid();
        let center: Vec<f64> = self.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
        let mut order: Vec<(f64, usize)> = (0..grid.n_voxels())
            .map(|i| {
                let c = grid.coords(i);
                let d2: f64 = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum();
                (d2, i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = order[..self.n_informative].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        chosen
    }

    /// Shift applied to each informative voxel.
    pub fn voxel_shift(&self) -> f64 {
        if self.n_informative == 0 {
            0.0
        } else {
            self.effect_norm / (self.n_informative as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub participant_ids: Vec<String>,
    pub informative: Vec<usize>,
    /// Mask of the informative voxels.
    pub informative_mask: PathBuf,
    /// Mask covering the whole grid.
    pub full_mask: PathBuf,
    /// Region 1 is the informative set; regions 2..=9 split the remaining
    /// voxels by octant around the grid center.
    pub atlas: PathBuf,
}

/// Writes a BIDS-lite tree with one baseline T1w volume per subject,
/// class -1 labeled CN and class +1 labeled AD, plus masks and an atlas
/// under `derivatives/synthetic/`. Identical specs give identical bytes.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_root: &Path) -> Result<SyntheticDataset> {
    spec.validate()?;
    let grid = spec.grid();
    let informative = spec.informative_indices();
    let shift = spec.voxel_shift();
    let n_total = spec.n_per_class[0] + spec.n_per_class[1];
    let width = n_total.to_string().len().max(4);

    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let mut participants = Vec::with_capacity(n_total);
    let mut ids = Vec::with_capacity(n_total);
    for s in 0..n_total {
        let positive = s >= spec.n_per_class[0];
        let dx = if positive { "AD" } else { "CN" };
        let id = format!("sub-{:0width$}", s + 1);
        let mut rng = rng_from(derive_seed(spec.seed, Stream::Synthetic, s as u64));
        let mut data: Vec<f64> = (0..grid.n_voxels()).map(|_| StandardNormal.sample(&mut rng)).collect();
        if positive {
            for &i in &informative {
                data[i] += shift;
            }
        }
        let dir = out_root.join(&id);
        let anat = dir.join("ses-M00").join("anat");
        fs::create_dir_all(&anat).map_err(io_err(&anat))?;
        write_volume(&Volume3D::new(grid.clone(), data)?, anat.join(format!("{id}_ses-M00_T1w.nii.gz")))?;
        write_tsv(
            &dir.join(format!("{id}_sessions.tsv")),
            &SESSION_COLUMNS,
            [vec!["ses-M00".into(), "0".into(), dx.into(), "n/a".into(), "n/a".into()]],
        )?;
        let sex = if s % 2 == 0 { "F" } else { "M" };
        participants.push(vec![id.clone(), sex.into(), "70".into(), dx.into(), "n/a".into(), "n/a".into()]);
        ids.push(id);
    }
    write_tsv(&out_root.join("participants.tsv"), &PARTICIPANT_COLUMNS, participants)?;

    let deriv = out_root.join("derivatives").join("synthetic");
    fs::create_dir_all(&deriv).map_err(io_err(&deriv))?;
    let mut included = vec![false; grid.n_voxels()];
    for &i in &informative {
        included[i] = true;
    }
    let informative_mask = deriv.join("mask_informative.nii.gz");
    write_volume(&BinaryMask::new(grid.clone(), included.clone())?.to_volume(), &informative_mask)?;
    let full_mask = deriv.join("mask_full.nii.gz");
    write_volume(&Volume3D::filled(grid.clone(), 1.0)?, &full_mask)?;

    let center: Vec<f64> = spec.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let labels: Vec<u32> = (0..grid.n_voxels())
        .map(|i| {
            if included[i] {
                return 1;
            }
            let c = grid.coords(i);
            let octant: u32 = (0..3).map(|a| u32::from(c[a] as f64 > center[a]) << a).sum();
            2 + octant
        })
        .collect();
    let atlas = deriv.join("atlas.nii.gz");
    write_labels(&LabelVolume::new(grid, labels)?, &atlas)?;

    Ok(SyntheticDataset { root: out_root.to_path_buf(), participant_ids: ids, informative, informative_mask, full_mask, atlas })
}
