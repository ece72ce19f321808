//! Boundary / margin / center decomposition of a binary mask.
//!
//! With `P_k` the zero-padded k³ average pool and `thres(x) = [x > 0]`:
//!
//! ```text
//! B(S) = thres(S ⊙ |S − P_3(S)|)
//! M(S) = thres(S ⊙ |S − P_7(S)|) − B(S)
//! C(S) = S − M(S) − B(S)
//! ```
//!
//! A foreground voxel is boundary when its 3-window leaves the mask,
//! margin when only its 7-window does, and center otherwise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Mask, Volume3};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubregionError {
    #[error("pooling kernel must be odd and positive, got {0}")]
    BadKernel(usize),
    #[error("region selector is empty")]
    EmptySelector,
    #[error("unknown region {0:?} (expected whole, B, M, C or a '+'-joined union)")]
    UnknownRegion(String),
}

/// Pooled values below this are treated as zero by the threshold.
pub const THRESHOLD_EPS: f64 = 1e-12;

pub const BOUNDARY_KERNEL: usize = 3;
pub const MARGIN_KERNEL: usize = 7;

/// Zero-padded k-wide box sum along one axis, in place.
fn box_sum_axis(data: &mut [f64], dims: [usize; 3], axis: usize, k: usize) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let half = k / 2;
    let mut line = vec![0.0; n];
    let mut prefix = vec![0.0; n + 1];
    let lines = data.len() / n;
    for l in 0..lines {
        // Map the line number to the first voxel of that line.
        let start = match axis {
            0 => l * dims[0],
            1 => (l / dims[0]) * dims[0] * dims[1] + (l % dims[0]),
            _ => l,
        };
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[start + i * stride];
        }
        for i in 0..n {
            prefix[i + 1] = prefix[i] + line[i];
        }
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            data[start + i * stride] = prefix[hi] - prefix[lo];
        }
    }
}

/// Average of the mask over the k³ window centered at each voxel, counting
/// out-of-bounds positions as zero.
pub fn avg_pool(mask: &Mask, k: usize) -> Result<Volume3, SubregionError> {
    if k == 0 || k % 2 == 0 {
        return Err(SubregionError::BadKernel(k));
    }
    let dims = mask.dims();
    let mut data: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    for axis in 0..3 {
        box_sum_axis(&mut data, dims, axis, k);
    }
    let norm = (k * k * k) as f64;
    for v in &mut data {
        *v /= norm;
    }
    Ok(Volume3::new(*mask.grid(), data).expect("pooled volume keeps the mask grid"))
}

/// `thres(S ⊙ |S − P_k(S)|)`: foreground voxels whose k-window is not
/// entirely foreground.
fn near_edge(mask: &Mask, k: usize) -> Mask {
    let pooled = avg_pool(mask, k).expect("fixed odd kernel");
    let data = mask
        .data()
        .iter()
        .zip(pooled.data())
        .map(|(&s, &p)| {
            let s = if s { 1.0 } else { 0.0 };
            s * (s - p).abs() > THRESHOLD_EPS
        })
        .collect();
    Mask::new(*mask.grid(), data).expect("same grid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubRegions {
    pub boundary: Mask,
    pub margin: Mask,
    pub center: Mask,
    pub source: Mask,
}

pub fn decompose(mask: &Mask) -> SubRegions {
    let boundary = near_edge(mask, BOUNDARY_KERNEL);
    let margin = near_edge(mask, MARGIN_KERNEL)
        .difference(&boundary)
        .expect("same grid");
    let center = mask
        .difference(&margin)
        .and_then(|m| m.difference(&boundary))
        .expect("same grid");
    SubRegions {
        boundary,
        margin,
        center,
        source: mask.clone(),
    }
}

impl SubRegions {
    pub fn counts(&self) -> [usize; 3] {
        [
            self.boundary.count(),
            self.margin.count(),
            self.center.count(),
        ]
    }

    /// Voxel-wise union of the selected sub-regions.
    pub fn region(&self, selector: RegionSet) -> Mask {
        let mut data = vec![false; self.source.grid().len()];
        for (part, on) in [
            (&self.boundary, selector.boundary),
            (&self.margin, selector.margin),
            (&self.center, selector.center),
        ] {
            if on {
                for (d, &p) in data.iter_mut().zip(part.data()) {
                    *d |= p;
                }
            }
        }
        Mask::new(*self.source.grid(), data).expect("same grid")
    }
}

pub fn union_region(subregions: &SubRegions, selector: RegionSet) -> Result<Mask, SubregionError> {
    if selector.is_empty() {
        return Err(SubregionError::EmptySelector);
    }
    Ok(subregions.region(selector))
}

/// A subset of {boundary, margin, center}. The full set is the whole mask.
///
/// Textual form: `whole`, `B`, `M`, `C`, or a `+`-joined union such as `B+M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RegionSet {
    pub boundary: bool,
    pub margin: bool,
    pub center: bool,
}

impl RegionSet {
    pub const BOUNDARY: RegionSet = RegionSet::new(true, false, false);
    pub const MARGIN: RegionSet = RegionSet::new(false, true, false);
    pub const CENTER: RegionSet = RegionSet::new(false, false, true);
    pub const WHOLE: RegionSet = RegionSet::new(true, true, true);

    pub const fn new(boundary: bool, margin: bool, center: bool) -> Self {
        Self {
            boundary,
            margin,
            center,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.boundary || self.margin || self.center)
    }

    pub fn is_whole(&self) -> bool {
        self.boundary && self.margin && self.center
    }

    pub fn contains(&self, other: RegionSet) -> bool {
        (self.boundary || !other.boundary)
            && (self.margin || !other.margin)
            && (self.center || !other.center)
    }

    /// Rows of the region-presence table, in display order.
    pub fn table_rows() -> [RegionSet; 7] {
        [
            RegionSet::BOUNDARY,
            RegionSet::MARGIN,
            RegionSet::CENTER,
            RegionSet::new(true, true, false),
            RegionSet::new(true, false, true),
            RegionSet::new(false, true, true),
            RegionSet::WHOLE,
        ]
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_whole() {
            return f.write_str("whole");
        }
        let parts: Vec<&str> = [
            (self.boundary, "B"),
            (self.margin, "M"),
            (self.center, "C"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for RegionSet {
    type Err = SubregionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = RegionSet::default();
        for part in s.split('+') {
            match part.trim() {
                "whole" | "W" => set = RegionSet::WHOLE,
                "B" => set.boundary = true,
                "M" => set.margin = true,
                "C" => set.center = true,
                _ => return Err(SubregionError::UnknownRegion(s.to_string())),
            }
        }
        if set.is_empty() {
            return Err(SubregionError::EmptySelector);
        }
        Ok(set)
    }
}

impl Serialize for RegionSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RegionSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
