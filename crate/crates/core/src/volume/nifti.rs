//! NIfTI-1 single-file reader and writer (`.nii`, `.nii.gz`).
//!
//! Reads datatypes uint8, int16, int32, float32 and float64 with
//! `scl_slope`/`scl_inter` applied; writes little-endian float32 for scalar
//! volumes and int32 for label volumes, with the sform set from the affine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{BinaryMask, Grid, LabelVolume, Result, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Result of [`read_nifti`]: integer-typed unscaled images whose values are
/// nonnegative come back as labels, everything else as scalars.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiImage {
    Scalar(Volume3D),
    Label(LabelVolume),
}

/// Header fields needed to validate a file without decoding its data.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeaderInfo {
    pub grid: Grid,
    pub datatype: i16,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io { path: path.to_path_buf(), source }
}

fn open_stream(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(io_err(path))?;
    let prefix = std::io::Cursor::new(magic[..n].to_vec());
    let chained = prefix.chain(file);
    if n == 2 && magic == GZIP_MAGIC {
        Ok(Box::new(GzDecoder::new(chained)))
    } else {
        Ok(Box::new(chained))
    }
}

fn read_exact_or_truncated(stream: &mut dyn Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    stream.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            VolumeError::Truncated { path: path.to_path_buf(), detail: what.to_string() }
        } else {
            VolumeError::Io { path: path.to_path_buf(), source: e }
        }
    })
}

fn i16_at(h: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([h[off], h[off + 1]])
}

fn i32_at(h: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(h[off..off + 4].try_into().unwrap())
}

fn f32_at(h: &[u8], off: usize) -> f64 {
    f32::from_le_bytes(h[off..off + 4].try_into().unwrap()) as f64
}

fn parse_header(h: &[u8], path: &Path) -> Result<NiftiHeaderInfo> {
    let magic = &h[344..348];
    if magic == b"ni1\0" {
        return Err(VolumeError::Invalid(format!(
            "{}: two-file .hdr/.img layout is not supported",
            path.display()
        )));
    }
    if magic != b"n+1\0" {
        return Err(VolumeError::BadMagic { path: path.to_path_buf() });
    }
    if i32_at(h, 0) != HEADER_SIZE as i32 {
        if i32::from_be_bytes(h[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(VolumeError::BigEndian { path: path.to_path_buf() });
        }
        return Err(VolumeError::BadMagic { path: path.to_path_buf() });
    }

    let dim: Vec<i16> = (0..8).map(|i| i16_at(h, 40 + 2 * i)).collect();
    let ndim = dim[0];
    let extra_are_singleton = (4..=7).all(|i| i as i16 > ndim || dim[i] == 1);
    if !(3..=7).contains(&ndim) || !extra_are_singleton || dim[1..4].iter().any(|&d| d < 1) {
        return Err(VolumeError::NotThreeDimensional {
            path: path.to_path_buf(),
            ndim,
            dims: dim[1..(ndim.clamp(0, 7) as usize + 1)].to_vec(),
        });
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = i16_at(h, 70);
    if ![DT_UINT8, DT_INT16, DT_INT32, DT_FLOAT32, DT_FLOAT64].contains(&datatype) {
        return Err(VolumeError::UnsupportedDatatype { path: path.to_path_buf(), code: datatype });
    }

    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(h, 76 + 4 * i)).collect();
    let voxel_size_mm = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];

    let qform_code = i16_at(h, 252);
    let sform_code = i16_at(h, 254);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (row, out) in a.iter_mut().take(3).enumerate() {
            for (col, v) in out.iter_mut().enumerate() {
                *v = f32_at(h, 280 + 16 * row + 4 * col);
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else if qform_code > 0 {
        qform_affine(h, &pixdim)
    } else {
        let mut a = [[0.0; 4]; 4];
        for axis in 0..3 {
            a[axis][axis] = voxel_size_mm[axis];
        }
        a[3][3] = 1.0;
        a
    };

    let vox_offset = f32_at(h, 108);
    if vox_offset < VOX_OFFSET as f64 - 4.0 {
        return Err(VolumeError::Truncated {
            path: path.to_path_buf(),
            detail: format!("vox_offset {vox_offset} overlaps the header"),
        });
    }

    let grid = Grid::with_affine(dims, voxel_size_mm, affine)?;
    Ok(NiftiHeaderInfo { grid, datatype, scl_slope: f32_at(h, 112), scl_inter: f32_at(h, 116) })
}

fn qform_affine(h: &[u8], pixdim: &[f64]) -> [[f64; 4]; 4] {
    let (b, c, d) = (f32_at(h, 256), f32_at(h, 260), f32_at(h, 264));
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [pixdim[1].abs(), pixdim[2].abs(), qfac * pixdim[3].abs()];
    let offset = [f32_at(h, 268), f32_at(h, 272), f32_at(h, 276)];
    let mut out = [[0.0; 4]; 4];
    for row in 0..3 {
        for col in 0..3 {
            out[row][col] = r[row][col] * scale[col];
        }
        out[row][3] = offset[row];
    }
    out[3][3] = 1.0;
    out
}

fn read_raw(path: &Path) -> Result<(NiftiHeaderInfo, Vec<f64>)> {
    let mut stream = open_stream(path)?;
    let mut header = vec![0u8; HEADER_SIZE];
    read_exact_or_truncated(stream.as_mut(), &mut header, path, "header")?;
    let info = parse_header(&header, path)?;

    let vox_offset = f32_at(&header, 108) as usize;
    let mut skip = vec![0u8; vox_offset.saturating_sub(HEADER_SIZE)];
    read_exact_or_truncated(stream.as_mut(), &mut skip, path, "extension block")?;

    let n = info.grid.n_voxels();
    let width = match info.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        _ => 8,
    };
    let mut bytes = vec![0u8; n * width];
    read_exact_or_truncated(stream.as_mut(), &mut bytes, path, "voxel data")?;

    let raw: Vec<f64> = match info.datatype {
        DT_UINT8 => bytes.iter().map(|&b| b as f64).collect(),
        DT_INT16 => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_INT32 => bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_FLOAT32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let scaled = if info.scl_slope != 0.0 && info.scl_slope.is_finite() && info.scl_inter.is_finite() {
        if info.scl_slope == 1.0 && info.scl_inter == 0.0 {
            raw
        } else {
            raw.into_iter().map(|v| v * info.scl_slope + info.scl_inter).collect()
        }
    } else {
        raw
    };
    Ok((info, scaled))
}

/// Parses only the header; the file is still required to be a valid 3D NIfTI-1.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeaderInfo> {
    let path = path.as_ref();
    let mut stream = open_stream(path)?;
    let mut header = vec![0u8; HEADER_SIZE];
    read_exact_or_truncated(stream.as_mut(), &mut header, path, "header")?;
    parse_header(&header, path)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (info, data) = read_raw(path.as_ref())?;
    Volume3D::new(info.grid, data)
}

/// Reads an atlas; every voxel must hold a nonnegative integer.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (info, data) = read_raw(path)?;
    let labels = data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(VolumeError::NotALabel { path: path.to_path_buf(), value: v })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(info.grid, labels)
}

/// Nonzero voxels are included.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(BinaryMask::from_volume(&read_volume(path)?))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let (info, data) = read_raw(path.as_ref())?;
    let integer_typed = matches!(info.datatype, DT_UINT8 | DT_INT16 | DT_INT32);
    let unscaled = info.scl_slope == 0.0 || (info.scl_slope == 1.0 && info.scl_inter == 0.0);
    if integer_typed && unscaled && data.iter().all(|&v| v >= 0.0) && data.iter().any(|&v| v != 0.0) {
        let labels = data.iter().map(|&v| v as u32).collect();
        return Ok(NiftiImage::Label(LabelVolume::new(info.grid, labels)?));
    }
    Ok(NiftiImage::Scalar(Volume3D::new(info.grid, data)?))
}

fn build_header(grid: &Grid, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f64| h[off..off + 4].copy_from_slice(&(v as f32).to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dims = [3, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let pixdim = [1.0, grid.voxel_size_mm[0], grid.voxel_size_mm[1], grid.voxel_size_mm[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    // mm + seconds
    h[123] = 2 | 8;
    let descrip = b"adml";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 2);
    for row in 0..3 {
        for col in 0..4 {
            put_f32(&mut h, 280 + 16 * row + 4 * col, grid.affine[row][col]);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, header: Vec<u8>, payload: Vec<u8>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut sink: Box<dyn Write> = if gz {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    sink.write_all(&header).map_err(io_err(path))?;
    sink.write_all(&payload).map_err(io_err(path))?;
    sink.flush().map_err(io_err(path))?;
    drop(sink);
    Ok(())
}

/// Writes float32 data; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = volume.data().iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::NonFinite { index });
    }
    let header = build_header(volume.grid(), DT_FLOAT32, 32);
    let payload = volume.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_bytes(path, header, payload)
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(&bad) = labels.labels().iter().find(|&&l| l > i32::MAX as u32) {
        return Err(VolumeError::Invalid(format!("label {bad} does not fit in int32")));
    }
    let header = build_header(labels.grid(), DT_INT32, 32);
    let payload = labels.labels().iter().flat_map(|&l| (l as i32).to_le_bytes()).collect();
    write_bytes(path, header, payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::new(dims, [1.5, 2.0, 2.5], [-10.0, 4.0, 7.25]).unwrap()
    }

    #[test]
    fn float_roundtrip_plain_and_gzip() {
        let dir = tempdir().unwrap();
        let g = grid([4, 4, 4]);
        let data: Vec<f64> = (0..64).map(|i| (i as f32 * 0.37 - 5.0) as f64).collect();
        let vol = Volume3D::new(g, data).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&vol, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.grid().dims, vol.grid().dims);
            assert_eq!(back.grid().voxel_size_mm, vol.grid().voxel_size_mm);
            assert!(back.grid().is_compatible(vol.grid()));
            assert_eq!(back.data(), vol.data());
        }
        let plain = std::fs::read(dir.path().join("v.nii")).unwrap();
        assert_eq!(plain.len(), VOX_OFFSET + 64 * 4);
    }

    #[test]
    fn constant_volume_reads_back_constant() {
        let dir = tempdir().unwrap();
        let vol = Volume3D::filled(grid([3, 2, 5]), 1.0).unwrap();
        let p = dir.path().join("c.nii.gz");
        write_volume(&vol, &p).unwrap();
        assert!(read_volume(&p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn labels_roundtrip_exactly() {
        let dir = tempdir().unwrap();
        let labels: Vec<u32> = (0..24).map(|i| (i % 3) as u32).collect();
        let atlas = LabelVolume::new(grid([2, 3, 4]), labels).unwrap();
        let p = dir.path().join("atlas.nii.gz");
        write_labels(&atlas, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), atlas);
        assert!(matches!(read_nifti(&p).unwrap(), NiftiImage::Label(a) if a == atlas));
    }

    #[test]
    fn scalar_file_reads_as_scalar() {
        let dir = tempdir().unwrap();
        let vol = Volume3D::filled(grid([2, 2, 2]), 2.0).unwrap();
        let p = dir.path().join("s.nii");
        write_volume(&vol, &p).unwrap();
        assert!(matches!(read_nifti(&p).unwrap(), NiftiImage::Scalar(_)));
    }

    #[test]
    fn nan_is_rejected_before_write() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("nan.nii");
        // Bypass the constructor check to simulate a corrupted in-memory value.
        let mut vol = Volume3D::filled(grid([2, 1, 1]), 0.0).unwrap();
        vol.data[1] = f64::NAN;
        assert!(matches!(write_volume(&vol, &p), Err(VolumeError::NonFinite { index: 1 })));
        assert!(!p.exists());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir().unwrap();
        let vol = Volume3D::filled(grid([2, 2, 2]), 2.0).unwrap();
        let p = dir.path().join("bad.nii");
        write_volume(&vol, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[344..348].copy_from_slice(b"xyz\0");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::BadMagic { .. })));
    }

    fn hand_header(datatype: i16, bitpix: i16, dims: [i16; 8]) -> Vec<u8> {
        let g = grid([1, 1, 1]);
        let mut h = build_header(&g, datatype, bitpix);
        for (i, d) in dims.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h
    }

    #[test]
    fn integer_datatypes_with_scaling() {
        let dir = tempdir().unwrap();
        let mut h = hand_header(DT_INT16, 16, [3, 2, 1, 1, 1, 1, 1, 1]);
        h[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        h[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        h.extend_from_slice(&7i16.to_le_bytes());
        h.extend_from_slice(&(-3i16).to_le_bytes());
        let p = dir.path().join("i16.nii");
        std::fs::write(&p, &h).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[13.0, -7.0]);

        let mut h = hand_header(DT_UINT8, 8, [3, 3, 1, 1, 1, 1, 1, 1]);
        h.extend_from_slice(&[0, 4, 255]);
        let p = dir.path().join("u8.nii");
        std::fs::write(&p, &h).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[0.0, 4.0, 255.0]);

        let mut h = hand_header(DT_FLOAT64, 64, [3, 1, 1, 1, 1, 1, 1, 1]);
        h.extend_from_slice(&0.1f64.to_le_bytes());
        let p = dir.path().join("f64.nii");
        std::fs::write(&p, &h).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[0.1]);
    }

    #[test]
    fn unsupported_datatype_and_dimensionality() {
        let dir = tempdir().unwrap();
        let mut h = hand_header(32, 64, [3, 1, 1, 1, 1, 1, 1, 1]);
        h.extend_from_slice(&[0u8; 8]);
        let p = dir.path().join("complex.nii");
        std::fs::write(&p, &h).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::UnsupportedDatatype { code: 32, .. })));

        let mut h = hand_header(DT_FLOAT32, 32, [4, 1, 1, 1, 3, 1, 1, 1]);
        h.extend_from_slice(&[0u8; 12]);
        let p = dir.path().join("4d.nii");
        std::fs::write(&p, &h).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::NotThreeDimensional { .. })));

        // 4D with a single frame is accepted as 3D.
        let mut h = hand_header(DT_FLOAT32, 32, [4, 1, 1, 1, 1, 1, 1, 1]);
        h.extend_from_slice(&1.5f32.to_le_bytes());
        let p = dir.path().join("4d1.nii");
        std::fs::write(&p, &h).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[1.5]);
    }

    #[test]
    fn truncated_data_is_an_error() {
        let dir = tempdir().unwrap();
        let h = hand_header(DT_FLOAT32, 32, [3, 4, 1, 1, 1, 1, 1, 1]);
        let p = dir.path().join("short.nii");
        std::fs::write(&p, &h).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::Truncated { .. })));
    }

    #[test]
    fn header_only_read() {
        let dir = tempdir().unwrap();
        let vol = Volume3D::filled(grid([5, 6, 7]), 0.5).unwrap();
        let p = dir.path().join("h.nii.gz");
        write_volume(&vol, &p).unwrap();
        let info = read_header(&p).unwrap();
        assert_eq!(info.grid.dims, [5, 6, 7]);
        assert_eq!(info.datatype, DT_FLOAT32);
    }

    #[test]
    fn gzip_output_is_deterministic() {
        let dir = tempdir().unwrap();
        let vol = Volume3D::filled(grid([3, 3, 3]), 0.25).unwrap();
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        write_volume(&vol, &a).unwrap();
        write_volume(&vol, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
