//! Dense 3D volumes, binary masks and intensity preprocessing.
//!
//! All grids use x-fastest linear order: `index = x + nx * (y + ny * z)`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dimensions must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("spacing must be strictly positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {len} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch {
        len: usize,
        dims: [usize; 3],
        expected: usize,
    },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch([f64; 3], [f64; 3]),
    #[error("voxel {index} has non-binary value {value}")]
    NotBinary { index: usize, value: f64 },
    #[error("foreground mask is empty")]
    EmptyForeground,
    #[error("invalid percentile range: lo={lo}, hi={hi}")]
    BadPercentiles { lo: f64, hi: f64 },
}

/// Shape, voxel spacing (mm) and origin (mm) of a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn isotropic(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, voxel: [i64; 3]) -> bool {
        voxel
            .iter()
            .zip(self.dims.iter())
            .all(|(&v, &d)| v >= 0 && (v as usize) < d)
    }

    pub fn check_same_dims(&self, other: &Grid) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    pub fn check_same_spacing(&self, other: &Grid) -> Result<(), VolumeError> {
        self.check_same_dims(other)?;
        if self.spacing != other.spacing {
            return Err(VolumeError::SpacingMismatch(self.spacing, other.spacing));
        }
        Ok(())
    }
}

// Spacing and origin compare bitwise; grids never hold NaN.
impl Eq for Grid {}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                len: data.len(),
                dims: grid.dims,
                expected: grid.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }
}

/// Binary volume. Voxels are either foreground (`true`) or background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: Grid,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                len: data.len(),
                dims: grid.dims,
                expected: grid.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            data: vec![false; grid.len()],
            grid,
        }
    }

    /// Builds a mask from voxel coordinates; out-of-bounds voxels are ignored.
    pub fn from_voxels<I>(grid: Grid, voxels: I) -> Self
    where
        I: IntoIterator<Item = [usize; 3]>,
    {
        let mut mask = Self::empty(grid);
        for [x, y, z] in voxels {
            if x < grid.dims[0] && y < grid.dims[1] && z < grid.dims[2] {
                mask.data[grid.index(x, y, z)] = true;
            }
        }
        mask
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    /// Validates that every value is exactly 0 or 1.
    pub fn from_volume(vol: &Volume3) -> Result<Self, VolumeError> {
        let data = vol
            .data()
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == 0.0 {
                    Ok(false)
                } else if value == 1.0 {
                    Ok(true)
                } else {
                    Err(VolumeError::NotBinary { index, value })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            grid: *vol.grid(),
            data,
        })
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3 {
            grid: self.grid,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.grid.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground voxel coordinates in storage order (z, then y, then x ascending).
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.grid.coords(i))
            .collect()
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask, VolumeError> {
        self.grid.check_same_dims(&other.grid)?;
        Ok(Mask {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask, VolumeError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.grid.dims == other.grid.dims
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            grid: self.grid,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Normalization statistics below this standard deviation divide by 1.
pub const SIGMA_EPS: f64 = 1e-8;

/// Clips all voxels to the foreground `[lo_pct, hi_pct]` percentiles, then
/// z-scores every voxel with the mean/std of the clipped foreground.
pub fn preprocess_intensity(
    vol: &Volume3,
    fg: &Mask,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<Volume3, VolumeError> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(VolumeError::BadPercentiles {
            lo: lo_pct,
            hi: hi_pct,
        });
    }
    vol.grid().check_same_dims(fg.grid())?;

    let mut fg_values: Vec<f64> = vol
        .data()
        .iter()
        .zip(fg.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if fg_values.is_empty() {
        return Err(VolumeError::EmptyForeground);
    }
    fg_values.sort_by(f64::total_cmp);
    let p_lo = percentile_sorted(&fg_values, lo_pct);
    let p_hi = percentile_sorted(&fg_values, hi_pct);

    let n = fg_values.len() as f64;
    let clipped_fg = fg_values.iter().map(|v| v.clamp(p_lo, p_hi));
    let mean = clipped_fg.clone().sum::<f64>() / n;
    let var = clipped_fg.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let scale = if sigma < SIGMA_EPS { 1.0 } else { sigma };

    let data = vol
        .data()
        .iter()
        .map(|v| (v.clamp(p_lo, p_hi) - mean) / scale)
        .collect();
    Volume3::new(*vol.grid(), data)
}
