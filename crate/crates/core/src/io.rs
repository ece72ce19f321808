//! Volume file formats.
//!
//! Two formats are supported:
//!
//! * an uncompressed single-file NIfTI-1 subset (`.nii`): 348-byte header,
//!   `n+1` magic, uint8 / int16 / float32 / float64 data, no extensions.
//!   Orientation is limited to identity or diagonal; only spacing and origin
//!   are kept.
//! * a raw little-endian blob (`.raw`) with a JSON sidecar (`.json`) of the
//!   form `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"dtype":"f32"|"u8"}`.
//!
//! Both store voxels x-fastest. Writers emit `u8` when every value is an
//! integer in `0..=255` and `f32` otherwise, so values that are not exactly
//! representable in `f32` are rounded on save.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Grid, Mask, Volume3, VolumeError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported format (expected .nii, .raw or .json)")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}: unsupported data type {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("{path}: expected {expected} data bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "f32")]
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Nifti,
    Raw,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "nii" => Some(Format::Nifti),
            "raw" | "json" => Some(Format::Raw),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Nifti => "nii",
            Format::Raw => "raw",
        }
    }

    /// `stem` plus this format's data file extension.
    pub fn file_name(self, stem: &str) -> String {
        format!("{stem}.{}", self.extension())
    }
}

fn storage_dtype(data: &[f64]) -> Dtype {
    if data
        .iter()
        .all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v))
    {
        Dtype::U8
    } else {
        Dtype::F32
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3, IoError> {
    let path = path.as_ref();
    match Format::from_path(path) {
        Some(Format::Nifti) => read_nifti(path),
        Some(Format::Raw) => read_raw(path),
        None => Err(IoError::UnsupportedFormat {
            path: path.to_path_buf(),
        }),
    }
}

pub fn save_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    match Format::from_path(path) {
        Some(Format::Nifti) => write_nifti(vol, path),
        Some(Format::Raw) => write_raw(vol, path),
        None => Err(IoError::UnsupportedFormat {
            path: path.to_path_buf(),
        }),
    }
}

/// Loads a volume and validates that it is binary.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask, IoError> {
    Ok(Mask::from_volume(&load_volume(path)?)?)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<(), IoError> {
    save_volume(&mask.to_volume(), path)
}

fn encode(data: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::U8 => data.iter().map(|&v| v as u8).collect(),
        Dtype::F32 => data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Raw + JSON sidecar

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
}

fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

fn read_raw(path: &Path) -> Result<Volume3, IoError> {
    let (raw_path, json_path) = raw_pair(path);
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let header: Sidecar = serde_json::from_str(&text).map_err(|source| IoError::Sidecar {
        path: json_path.clone(),
        source,
    })?;
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let width = match header.dtype {
        Dtype::U8 => 1,
        Dtype::F32 => 4,
    };
    let expected = grid.len() * width;
    if bytes.len() != expected {
        return Err(IoError::SizeMismatch {
            path: raw_path,
            expected,
            found: bytes.len(),
        });
    }
    let data = match header.dtype {
        Dtype::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    };
    Ok(Volume3::new(grid, data)?)
}

fn write_raw(vol: &Volume3, path: &Path) -> Result<(), IoError> {
    let (raw_path, json_path) = raw_pair(path);
    let grid = vol.grid();
    let dtype = storage_dtype(vol.data());
    let header = Sidecar {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype,
    };
    let json = serde_json::to_string(&header).expect("sidecar serializes");
    fs::write(&raw_path, encode(vol.data(), dtype)).map_err(io_err(&raw_path))?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// NIfTI-1

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_nifti(path: &Path) -> Result<Volume3, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header_err = |message: String| IoError::Header {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(header_err(format!(
            "file has {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        return Err(header_err(format!(
            "sizeof_hdr is {sizeof_hdr}; only little-endian NIfTI-1 is supported"
        )));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(header_err("missing single-file magic \"n+1\"".into()));
    }

    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(header_err(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let n = le_i16(&bytes, 42 + 2 * axis);
        if n < 1 {
            return Err(header_err(format!("dim[{}] = {n}", axis + 1)));
        }
        *d = n as usize;
    }
    for axis in 3..ndim as usize {
        let n = le_i16(&bytes, 42 + 2 * axis);
        if n > 1 {
            return Err(header_err(format!(
                "dim[{}] = {n}; only single-frame volumes are supported",
                axis + 1
            )));
        }
    }

    let datatype = le_i16(&bytes, 70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(IoError::UnsupportedDtype {
                path: path.to_path_buf(),
                dtype: format!("NIfTI datatype code {other}"),
            })
        }
    };

    let mut spacing = [1.0f64; 3];
    for (axis, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
        *s = f64::from(le_f32(&bytes, 80 + 4 * axis).abs());
    }

    let qform_code = le_i16(&bytes, 252);
    let sform_code = le_i16(&bytes, 254);
    let origin = if qform_code > 0 {
        [
            f64::from(le_f32(&bytes, 268)),
            f64::from(le_f32(&bytes, 272)),
            f64::from(le_f32(&bytes, 276)),
        ]
    } else if sform_code > 0 {
        [
            f64::from(le_f32(&bytes, 280 + 12)),
            f64::from(le_f32(&bytes, 296 + 12)),
            f64::from(le_f32(&bytes, 312 + 12)),
        ]
    } else {
        [0.0; 3]
    };

    let vox_offset = le_f32(&bytes, 108);
    if vox_offset < NIFTI_HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(header_err(format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let grid = Grid::new(dims, spacing, origin)?;
    let expected = grid.len() * width;
    let available = bytes.len().saturating_sub(start);
    if available != expected {
        return Err(IoError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: available,
        });
    }
    let body = &bytes[start..];

    let mut data: Vec<f64> = match datatype {
        DT_UINT8 => body.iter().map(|&b| f64::from(b)).collect(),
        DT_INT16 => body
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DT_FLOAT32 => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };

    let slope = le_f32(&bytes, 112);
    let inter = le_f32(&bytes, 116);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) && slope.is_finite() {
        let (slope, inter) = (f64::from(slope), f64::from(inter));
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(Volume3::new(grid, data)?)
}

fn nifti_header(grid: &Grid, dtype: Dtype) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let mut put = |off: usize, bytes: &[u8]| h[off..off + bytes.len()].copy_from_slice(bytes);

    put(0, &(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    put(38, b"r"); // regular
    put(40, &3i16.to_le_bytes());
    for (axis, &n) in grid.dims.iter().enumerate() {
        let n = i16::try_from(n).expect("dimension fits NIfTI-1 i16");
        put(42 + 2 * axis, &n.to_le_bytes());
    }
    for axis in 3..7 {
        put(42 + 2 * axis, &1i16.to_le_bytes());
    }
    let (code, bitpix) = match dtype {
        Dtype::U8 => (DT_UINT8, 8i16),
        Dtype::F32 => (DT_FLOAT32, 32i16),
    };
    put(70, &code.to_le_bytes());
    put(72, &bitpix.to_le_bytes());
    put(76, &1f32.to_le_bytes()); // qfac
    for (axis, &s) in grid.spacing.iter().enumerate() {
        put(80 + 4 * axis, &(s as f32).to_le_bytes());
    }
    put(108, &(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    put(112, &1f32.to_le_bytes()); // scl_slope
    put(123, &[10u8]); // xyzt_units: mm + sec

    // Scanner-anat qform with identity rotation; sform carries the same
    // diagonal affine.
    put(252, &1i16.to_le_bytes());
    put(254, &1i16.to_le_bytes());
    for (axis, &o) in grid.origin.iter().enumerate() {
        put(268 + 4 * axis, &(o as f32).to_le_bytes());
    }
    for row in 0..3 {
        let off = 280 + 16 * row;
        put(off + 4 * row, &(grid.spacing[row] as f32).to_le_bytes());
        put(off + 12, &(grid.origin[row] as f32).to_le_bytes());
    }
    put(344, b"n+1\0");
    h
}

fn write_nifti(vol: &Volume3, path: &Path) -> Result<(), IoError> {
    let grid = vol.grid();
    if grid.dims.iter().any(|&n| n > i16::MAX as usize) {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            message: format!("dims {:?} exceed the NIfTI-1 limit", grid.dims),
        });
    }
    let dtype = storage_dtype(vol.data());
    let mut bytes = nifti_header(grid, dtype);
    bytes.extend(encode(vol.data(), dtype));
    fs::write(path, bytes).map_err(io_err(path))
}
