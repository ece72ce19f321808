//! Dice, surface extraction, exact Euclidean distance transform and
//! normalized surface Dice.
//!
//! Surfaces are sets of voxel centers: foreground voxels with at least one
//! 6-neighbour that is background or outside the grid. Surface distances
//! are between voxel centers in millimetres.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Mask, Volume3, VolumeError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("distance transform of an empty mask")]
    EmptyMask,
    #[error("negative surface tolerance {0}")]
    NegativeTolerance(f64),
    #[error(transparent)]
    Grid(#[from] VolumeError),
}

/// Default surface tolerance in millimetres.
pub const DEFAULT_TAU_MM: f64 = 1.0;

/// Absolute slack on `distance <= tau`, absorbing rounding in distances
/// that are exactly at the tolerance.
pub const TAU_SLACK_MM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dice: f64,
    pub nsd: f64,
    pub tau_mm: f64,
}

pub fn evaluate(pred: &Mask, gt: &Mask, tau_mm: f64) -> Result<MetricRecord, MetricError> {
    Ok(MetricRecord {
        dice: dice(pred, gt)?,
        nsd: nsd(pred, gt, tau_mm)?,
        tau_mm,
    })
}

/// `2|P ∩ G| / (|P| + |G|)`, 1.0 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    pred.grid().check_same_dims(gt.grid())?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        both += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// Foreground voxels with a background or out-of-grid 6-neighbour.
pub fn surface_voxels(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.dims();
    Mask::from_fn(*mask.grid(), |x, y, z| {
        if !mask.get(x, y, z) {
            return false;
        }
        x == 0
            || y == 0
            || z == 0
            || x + 1 == nx
            || y + 1 == ny
            || z + 1 == nz
            || !mask.get(x - 1, y, z)
            || !mask.get(x + 1, y, z)
            || !mask.get(x, y - 1, z)
            || !mask.get(x, y + 1, z)
            || !mask.get(x, y, z - 1)
            || !mask.get(x, y, z + 1)
    })
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas). Infinite samples are not sites.
struct Envelope {
    sites: Vec<usize>,
    starts: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            starts: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], spacing: f64, out: &mut [f64]) {
        let n = f.len();
        self.sites.clear();
        self.starts.clear();
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            let pq = q as f64 * spacing;
            loop {
                let Some(&r) = self.sites.last() else {
                    self.sites.push(q);
                    self.starts.push(f64::NEG_INFINITY);
                    break;
                };
                let pr = r as f64 * spacing;
                let s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
                if s <= *self.starts.last().expect("parallel stacks") {
                    self.sites.pop();
                    self.starts.pop();
                } else {
                    self.sites.push(q);
                    self.starts.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let x = q as f64 * spacing;
            while k + 1 < self.sites.len() && self.starts[k + 1] < x {
                k += 1;
            }
            let r = self.sites[k];
            let d = (q as f64 - r as f64) * spacing;
            *o = d * d + f[r];
        }
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest
/// foreground voxel; infinite everywhere when the mask is empty.
pub fn squared_edt(mask: &Mask) -> Vec<f64> {
    let grid = mask.grid();
    let dims = grid.dims;
    let mut field: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let max_n = *dims.iter().max().expect("three axes");
    let mut env = Envelope::new(max_n);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let (a, b) = match axis {
            0 => (dims[1], dims[2]),
            1 => (dims[0], dims[2]),
            _ => (dims[0], dims[1]),
        };
        for j in 0..b {
            for i in 0..a {
                let start = match axis {
                    0 => grid.index(0, i, j),
                    1 => grid.index(i, 0, j),
                    _ => grid.index(i, j, 0),
                };
                for t in 0..n {
                    line[t] = field[start + t * stride];
                }
                env.transform(&line[..n], grid.spacing[axis], &mut out[..n]);
                for t in 0..n {
                    field[start + t * stride] = out[t];
                }
            }
        }
    }
    field
}

/// Exact Euclidean distance (mm, anisotropic spacing honoured) from every
/// voxel to the nearest foreground voxel of `mask`.
pub fn edt(mask: &Mask) -> Result<Volume3, MetricError> {
    if mask.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let data = squared_edt(mask).into_iter().map(f64::sqrt).collect();
    Ok(Volume3::new(*mask.grid(), data)?)
}

/// Number of `from` voxels within `tau_mm` of the nearest voxel of `to`.
fn within_tolerance(from: &Mask, to: &Mask, tau_mm: f64) -> usize {
    let sq = squared_edt(to);
    let limit = tau_mm + TAU_SLACK_MM;
    from.data()
        .iter()
        .zip(&sq)
        .filter(|(&f, &d2)| f && d2.sqrt() <= limit)
        .count()
}

/// Normalized surface Dice at tolerance `tau_mm`.
///
/// 1.0 when both masks are empty and 0.0 when exactly one is.
pub fn nsd(pred: &Mask, gt: &Mask, tau_mm: f64) -> Result<f64, MetricError> {
    pred.grid().check_same_spacing(gt.grid())?;
    if !(tau_mm >= 0.0) {
        return Err(MetricError::NegativeTolerance(tau_mm));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let hits = within_tolerance(&sp, &sg, tau_mm) + within_tolerance(&sg, &sp, tau_mm);
    Ok(hits as f64 / (sp.count() + sg.count()) as f64)
}
