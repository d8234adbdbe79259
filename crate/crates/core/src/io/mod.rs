//! Volume file I/O.
//!
//! Two formats are supported, chosen by file extension:
//!
//! * NIfTI-1 single file (`.nii`, `.nii.gz`) with uint8, int16, float32 or
//!   float64 voxels. Orientation is ignored; only voxel spacing is kept.
//!   Spacing is stored as float32 in the header.
//! * A JSON sidecar (`name.json`, holding `{dims, spacing, dtype}`) next to a
//!   little-endian raw payload (`name.raw`). Spacing round-trips exactly.

pub mod nifti;
pub mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing, VoxelGrid, ZoneGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I16,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types that can be stored on disk.
pub trait Element: Copy + Send + Sync + 'static {
    const DTYPE: DType;
    fn put_le(self, out: &mut Vec<u8>);
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

impl Element for i16 {
    const DTYPE: DType = DType::I16;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// A grid read from disk, in its stored scalar type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyGrid {
    U8(VoxelGrid<u8>),
    I16(VoxelGrid<i16>),
    F32(VoxelGrid<f32>),
    F64(VoxelGrid<f64>),
}

impl AnyGrid {
    pub fn dtype(&self) -> DType {
        match self {
            AnyGrid::U8(_) => DType::U8,
            AnyGrid::I16(_) => DType::I16,
            AnyGrid::F32(_) => DType::F32,
            AnyGrid::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyGrid::U8(g) => g.dims(),
            AnyGrid::I16(g) => g.dims(),
            AnyGrid::F32(g) => g.dims(),
            AnyGrid::F64(g) => g.dims(),
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            AnyGrid::U8(g) => g.spacing(),
            AnyGrid::I16(g) => g.spacing(),
            AnyGrid::F32(g) => g.spacing(),
            AnyGrid::F64(g) => g.spacing(),
        }
    }

    pub fn to_f64(&self) -> VoxelGrid<f64> {
        match self {
            AnyGrid::U8(g) => g.map(|&v| v as f64),
            AnyGrid::I16(g) => g.map(|&v| v as f64),
            AnyGrid::F32(g) => g.map(|&v| v as f64),
            AnyGrid::F64(g) => g.clone(),
        }
    }

    /// Intensity view. Lossy only for float64 sources.
    pub fn to_f32(&self) -> VoxelGrid<f32> {
        match self {
            AnyGrid::U8(g) => g.map(|&v| v as f32),
            AnyGrid::I16(g) => g.map(|&v| v as f32),
            AnyGrid::F32(g) => g.clone(),
            AnyGrid::F64(g) => g.map(|&v| v as f32),
        }
    }

    /// Label view; every voxel must hold an integer in `0..=255`.
    pub fn to_labels(&self) -> Result<ZoneGrid> {
        if let AnyGrid::U8(g) = self {
            return Ok(g.clone());
        }
        let f = self.to_f64();
        if let Some(bad) = f
            .data()
            .iter()
            .find(|v| v.fract() != 0.0 || **v < 0.0 || **v > 255.0)
        {
            return Err(Error::Invalid {
                key: "label voxel".into(),
                value: bad.to_string(),
                expected: "integer in 0..=255".into(),
            });
        }
        Ok(f.map(|&v| v as u8))
    }
}

enum Format {
    Nifti { gzip: bool },
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gzip: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gzip: false })
    } else if name.ends_with(".json") || name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(Error::Format {
            field: "extension",
            detail: format!("{} is not .nii, .nii.gz, .json or .raw", path.display()),
        })
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyGrid> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti { .. } => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            nifti::decode(&bytes)
        }
        Format::Raw => raw::read(path),
    }
}

pub fn write_volume<T: Element>(grid: &VoxelGrid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if grid.dims().is_empty() {
        return Err(Error::Size(format!("refusing to write empty grid {}", grid.dims())));
    }
    match format_of(path)? {
        Format::Nifti { gzip } => {
            let bytes = nifti::encode(grid, gzip)?;
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        Format::Raw => raw::write(grid, path),
    }
}

/// Masks are stored as uint8 {0, 1}.
pub fn write_mask(mask: &VoxelGrid<bool>, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&mask.map(|&b| b as u8), path)
}

pub(crate) fn encode_payload<T: Element>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &v in data {
        v.put_le(&mut out);
    }
    out
}

pub(crate) fn decode_payload(
    dtype: DType,
    bytes: &[u8],
    dims: Dims,
    spacing: Spacing,
    big_endian: bool,
) -> Result<AnyGrid> {
    let want = dims.len() * dtype.size();
    if bytes.len() != want {
        return Err(Error::Size(format!(
            "header declares {dims} {dtype:?} voxels ({want} bytes), payload has {} bytes",
            bytes.len()
        )));
    }
    use byteorder::{BigEndian, ByteOrder, LittleEndian};
    macro_rules! decode {
        ($ty:ty, $read:ident, $variant:ident) => {{
            let n = std::mem::size_of::<$ty>();
            let data: Vec<$ty> = bytes
                .chunks_exact(n)
                .map(|c| {
                    if big_endian {
                        BigEndian::$read(c)
                    } else {
                        LittleEndian::$read(c)
                    }
                })
                .collect();
            AnyGrid::$variant(VoxelGrid::new(dims, spacing, data)?)
        }};
    }
    Ok(match dtype {
        DType::U8 => AnyGrid::U8(VoxelGrid::new(dims, spacing, bytes.to_vec())?),
        DType::I16 => decode!(i16, read_i16, I16),
        DType::F32 => decode!(f32, read_f32, F32),
        DType::F64 => decode!(f64, read_f64, F64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f32(dims: Dims, spacing: Spacing, seed: u64) -> VoxelGrid<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::from_fn(dims, spacing, |_, _, _| rng.gen_range(-1000.0f32..1000.0))
    }

    #[test]
    fn round_trip_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let g = random_f32(Dims::cube(16), Spacing::new(1.0, 0.5, 2.0), 7);
        for name in ["a.nii", "a.nii.gz", "a.json"] {
            let p = dir.path().join(name);
            write_volume(&g, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back, AnyGrid::F32(g.clone()), "{name}");
            let max_diff = back
                .to_f32()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert_eq!(max_diff, 0.0);
        }
    }

    #[test]
    fn zone_labels_keep_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::from_fn(Dims::new(3, 4, 5), Spacing::default(), |z, y, x| ((z + y + x) % 4) as u8);
        for name in ["z.nii.gz", "z.json"] {
            let p = dir.path().join(name);
            write_volume(&g, &p).unwrap();
            let back = read_volume(&p).unwrap().to_labels().unwrap();
            let mut seen: Vec<u8> = back.data().to_vec();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, vec![0, 1, 2, 3]);
            assert_eq!(back, g);
        }
    }

    #[test]
    fn single_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::new(Dims::cube(1), Spacing::default(), vec![0i16]).unwrap();
        let p = dir.path().join("one.nii");
        write_volume(&g, &p).unwrap();
        match read_volume(&p).unwrap() {
            AnyGrid::I16(b) => {
                assert_eq!(b.dims(), Dims::cube(1));
                assert_eq!(b.data(), &[0]);
            }
            other => panic!("unexpected {:?}", other.dtype()),
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::<u8>::new(Dims::new(0, 4, 4), Spacing::default(), vec![]).unwrap();
        assert!(matches!(
            write_volume(&g, dir.path().join("e.nii")),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn unknown_extension_rejected() {
        let g = VoxelGrid::filled(Dims::cube(1), Spacing::default(), 0u8);
        assert!(matches!(
            write_volume(&g, "/tmp/x.png"),
            Err(Error::Format { field: "extension", .. })
        ));
    }

    #[test]
    fn write_to_missing_directory_names_path() {
        let g = VoxelGrid::filled(Dims::cube(1), Spacing::default(), 0u8);
        let err = write_volume(&g, "/nonexistent-dir/x.nii").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.nii"));
    }

    #[test]
    fn labels_reject_fractional_values() {
        let g = VoxelGrid::filled(Dims::cube(2), Spacing::default(), 1.5f32);
        assert!(AnyGrid::F32(g).to_labels().is_err());
    }
}
