//! Seeded synthetic phantoms: irregular blobs made of overlapping
//! ellipsoids, used as ground truth when no real data is at hand.

use crate::rng::SplitMix64;
use crate::volume::{Grid, Mask, Volume3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    /// Number of ellipsoid lobes, inclusive range.
    pub lobes: (usize, usize),
    /// Semi-axis length range in voxels.
    pub radius: (f64, f64),
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            lobes: (1, 3),
            radius: (4.0, 9.0),
        }
    }
}

fn unit(rng: &mut SplitMix64) -> f64 {
    (rng.next() >> 11) as f64 / (1u64 << 53) as f64
}

fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// A nonempty blob mask, fully determined by `seed`.
pub fn blob(seed: u64, params: &PhantomParams) -> Mask {
    let grid = Grid::isotropic(params.dims).expect("phantom dims are positive");
    let mut rng = SplitMix64::new(seed);
    let (lo, hi) = params.lobes;
    let lobes = lo + rng.below((hi - lo + 1) as u64) as usize;
    let mid = params.dims.map(|d| d as f64 / 2.0);
    let mut ellipsoids = Vec::with_capacity(lobes);
    for _ in 0..lobes {
        let radii = [0; 3].map(|_| uniform(&mut rng, params.radius.0, params.radius.1));
        let center = [0, 1, 2].map(|a| {
            let spread = (params.dims[a] as f64 / 2.0 - radii[a] - 1.0).max(0.0) * 0.5;
            mid[a] + uniform(&mut rng, -spread, spread)
        });
        ellipsoids.push((center, radii));
    }
    let mask = Mask::from_fn(grid, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        ellipsoids.iter().any(|(c, r)| {
            (0..3)
                .map(|a| ((p[a] - c[a]) / r[a]).powi(2))
                .sum::<f64>()
                <= 1.0
        })
    });
    if mask.is_empty() {
        // Degenerate radii; fall back to the central voxel.
        let [cx, cy, cz] = params.dims.map(|d| d / 2);
        return Mask::from_voxels(grid, [[cx, cy, cz]]);
    }
    mask
}

/// Intensity image for a phantom: bright object on a darker background
/// with seeded uniform noise.
pub fn image(mask: &Mask, seed: u64) -> Volume3 {
    let mut rng = SplitMix64::new(seed ^ 0x5eed_1a6e);
    let data = mask
        .data()
        .iter()
        .map(|&b| if b { 100.0 } else { 40.0 } + uniform(&mut rng, -10.0, 10.0))
        .collect();
    Volume3::new(*mask.grid(), data).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonempty() {
        let p = PhantomParams::default();
        for seed in 0..10 {
            let a = blob(seed, &p);
            assert!(!a.is_empty());
            assert_eq!(a, blob(seed, &p));
        }
        assert_ne!(blob(1, &p), blob(2, &p));
    }

    #[test]
    fn image_matches_mask_grid() {
        let m = blob(3, &PhantomParams::default());
        let img = image(&m, 3);
        assert_eq!(img.dims(), m.dims());
        assert!(img.data().iter().all(|v| (30.0..=110.0).contains(v)));
    }
}
