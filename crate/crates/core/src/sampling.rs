//! Seeded point-prompt sampling and the four selection strategies.
//!
//! Every random choice goes through [`region_permutation`]: foreground
//! voxels of a region are listed in (z, y, x) ascending order and shuffled
//! with the splitmix64 Fisher–Yates of [`crate::rng`]. Taking the first `n`
//! entries of that permutation makes prompt sets prefix-stable: for a fixed
//! region and seed, asking for more prompts only appends.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::subregion::{RegionSet, SubRegions};
use crate::volume::Mask;

pub type Voxel = [usize; 3];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("strategy requests no prompts")]
    NoPrompts,
    #[error("strategy has an empty region selector")]
    EmptyRegion,
    #[error("source mask is empty; no region can supply prompts")]
    EmptySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initial,
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub voxel: Voxel,
    pub label: Label,
    pub role: Role,
    pub region: RegionSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingWarning {
    EmptyRegionFallback {
        requested: RegionSet,
        used: RegionSet,
    },
    ClampedCount {
        region: RegionSet,
        requested: usize,
        available: usize,
    },
}

/// Ordered prompts; initial prompts precede cumulative ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub seed: u64,
    pub prompts: Vec<Prompt>,
    #[serde(default)]
    pub warnings: Vec<SamplingWarning>,
}

impl PromptSet {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            prompts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn voxels(&self) -> Vec<Voxel> {
        self.prompts.iter().map(|p| p.voxel).collect()
    }

    pub fn positives(&self) -> impl Iterator<Item = Voxel> + '_ {
        self.prompts
            .iter()
            .filter(|p| p.label == Label::Positive)
            .map(|p| p.voxel)
    }

    pub fn negatives(&self) -> impl Iterator<Item = Voxel> + '_ {
        self.prompts
            .iter()
            .filter(|p| p.label == Label::Negative)
            .map(|p| p.voxel)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt sets serialize")
    }
}

/// All foreground voxels of `region`, shuffled deterministically by `seed`.
pub fn region_permutation(region: &Mask, seed: u64) -> Vec<Voxel> {
    let mut voxels = region.voxels();
    SplitMix64::new(seed).shuffle(&mut voxels);
    voxels
}

/// First `n` voxels of the seeded permutation of `region \ exclude`, as
/// positive prompts tagged with `region_tag` and `role`.
fn draw(
    region: &Mask,
    region_tag: RegionSet,
    role: Role,
    n: usize,
    seed: u64,
    exclude: &HashSet<Voxel>,
    warnings: &mut Vec<SamplingWarning>,
) -> Vec<Prompt> {
    let mut candidates = region.clone();
    for &[x, y, z] in exclude {
        if region.get(x, y, z) {
            candidates.set(x, y, z, false);
        }
    }
    let perm = region_permutation(&candidates, seed);
    if n > perm.len() {
        warnings.push(SamplingWarning::ClampedCount {
            region: region_tag,
            requested: n,
            available: perm.len(),
        });
    }
    perm.into_iter()
        .take(n)
        .map(|voxel| Prompt {
            voxel,
            label: Label::Positive,
            role,
            region: region_tag,
        })
        .collect()
}

/// Positive prompts from `region`, excluding `exclude`; clamps with a
/// warning when fewer than `n` voxels are available.
pub fn sample_prompts(region: &Mask, n: usize, seed: u64, exclude: &HashSet<Voxel>) -> PromptSet {
    let mut warnings = Vec::new();
    let prompts = draw(
        region,
        RegionSet::WHOLE,
        Role::Initial,
        n,
        seed,
        exclude,
        &mut warnings,
    );
    PromptSet {
        seed,
        prompts,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub region: RegionSet,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedRole {
    Fixed,
    PerRun,
}

/// A fully resolved selection strategy.
///
/// `Cumulative` keeps its initial prompts fixed across runs and varies the
/// cumulative ones; `InitialVaried` does the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategySpec {
    RandomWhole { count: usize },
    RegionConstrained { region: RegionSet, count: usize },
    Cumulative { initial: Stage, cumulative: Stage },
    InitialVaried { initial: Stage, cumulative: Stage },
}

impl StrategySpec {
    pub fn total_count(&self) -> usize {
        match *self {
            StrategySpec::RandomWhole { count } | StrategySpec::RegionConstrained { count, .. } => {
                count
            }
            StrategySpec::Cumulative {
                initial,
                cumulative,
            }
            | StrategySpec::InitialVaried {
                initial,
                cumulative,
            } => initial.count + cumulative.count,
        }
    }

    /// Seed roles of the (initial, cumulative) stages.
    pub fn seed_roles(&self) -> (SeedRole, SeedRole) {
        match self {
            StrategySpec::Cumulative { .. } => (SeedRole::Fixed, SeedRole::PerRun),
            StrategySpec::InitialVaried { .. } => (SeedRole::PerRun, SeedRole::Fixed),
            _ => (SeedRole::PerRun, SeedRole::PerRun),
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.total_count() == 0 {
            return Err(SamplingError::NoPrompts);
        }
        let empty_region = match self {
            StrategySpec::RandomWhole { .. } => false,
            StrategySpec::RegionConstrained { region, .. } => region.is_empty(),
            StrategySpec::Cumulative {
                initial,
                cumulative,
            }
            | StrategySpec::InitialVaried {
                initial,
                cumulative,
            } => initial.region.is_empty() || cumulative.region.is_empty(),
        };
        if empty_region {
            return Err(SamplingError::EmptyRegion);
        }
        Ok(())
    }
}

const FALLBACK_CHAIN: [RegionSet; 4] = [
    RegionSet::CENTER,
    RegionSet::MARGIN,
    RegionSet::BOUNDARY,
    RegionSet::WHOLE,
];

/// The requested region, followed by the fallback regions that lie further
/// out than every sub-region it selects (C → M → B → whole).
fn fallback_candidates(requested: RegionSet) -> impl Iterator<Item = RegionSet> {
    let outermost = FALLBACK_CHAIN[..3]
        .iter()
        .rposition(|r| requested.contains(*r))
        .unwrap_or(0);
    std::iter::once(requested).chain(
        FALLBACK_CHAIN[outermost + 1..]
            .iter()
            .copied()
            .filter(move |r| *r != requested),
    )
}

/// Resolves `requested` to the first nonempty region of its fallback chain.
fn resolve_region(
    subregions: &SubRegions,
    requested: RegionSet,
    warnings: &mut Vec<SamplingWarning>,
) -> Result<(RegionSet, Mask), SamplingError> {
    for candidate in fallback_candidates(requested) {
        let mask = subregions.region(candidate);
        if !mask.is_empty() {
            if candidate != requested {
                warnings.push(SamplingWarning::EmptyRegionFallback {
                    requested,
                    used: candidate,
                });
            }
            return Ok((candidate, mask));
        }
    }
    Err(SamplingError::EmptySource)
}

fn draw_stage(
    subregions: &SubRegions,
    stage: Stage,
    role: Role,
    seed: u64,
    exclude: &HashSet<Voxel>,
    warnings: &mut Vec<SamplingWarning>,
) -> Result<Vec<Prompt>, SamplingError> {
    if stage.count == 0 {
        return Ok(Vec::new());
    }
    let (tag, mask) = resolve_region(subregions, stage.region, warnings)?;
    Ok(draw(&mask, tag, role, stage.count, seed, exclude, warnings))
}

/// Generates the prompt set of one run.
///
/// For two-stage strategies the fixed-seed stage is drawn first and the
/// per-run stage excludes its voxels, so the fixed prompts are identical in
/// every run. Output order is always initial prompts, then cumulative.
pub fn build_strategy_prompts(
    spec: &StrategySpec,
    subregions: &SubRegions,
    fixed_seed: u64,
    run_seed: u64,
) -> Result<PromptSet, SamplingError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let none = HashSet::new();
    let prompts = match *spec {
        StrategySpec::RandomWhole { count } => draw_stage(
            subregions,
            Stage {
                region: RegionSet::WHOLE,
                count,
            },
            Role::Initial,
            run_seed,
            &none,
            &mut warnings,
        )?,
        StrategySpec::RegionConstrained { region, count } => draw_stage(
            subregions,
            Stage { region, count },
            Role::Initial,
            run_seed,
            &none,
            &mut warnings,
        )?,
        StrategySpec::Cumulative {
            initial,
            cumulative,
        } => {
            let first = draw_stage(subregions, initial, Role::Initial, fixed_seed, &none, &mut warnings)?;
            let taken: HashSet<Voxel> = first.iter().map(|p| p.voxel).collect();
            let second = draw_stage(
                subregions,
                cumulative,
                Role::Cumulative,
                run_seed,
                &taken,
                &mut warnings,
            )?;
            first.into_iter().chain(second).collect()
        }
        StrategySpec::InitialVaried {
            initial,
            cumulative,
        } => {
            let fixed = draw_stage(
                subregions,
                cumulative,
                Role::Cumulative,
                fixed_seed,
                &none,
                &mut warnings,
            )?;
            let taken: HashSet<Voxel> = fixed.iter().map(|p| p.voxel).collect();
            let varied = draw_stage(subregions, initial, Role::Initial, run_seed, &taken, &mut warnings)?;
            varied.into_iter().chain(fixed).collect()
        }
    };
    Ok(PromptSet {
        seed: run_seed,
        prompts,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subregion::decompose;
    use crate::volume::Grid;

    fn cube(n: usize, lo: usize, hi: usize) -> Mask {
        let grid = Grid::isotropic([n, n, n]).unwrap();
        Mask::from_fn(grid, |x, y, z| {
            (lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z)
        })
    }

    #[test]
    fn single_voxel_permutation() {
        let m = cube(3, 1, 2);
        for seed in [0, 1, u64::MAX] {
            assert_eq!(region_permutation(&m, seed), vec![[1, 1, 1]]);
        }
    }

    #[test]
    fn two_voxel_trace_seed_zero() {
        let grid = Grid::isotropic([2, 1, 1]).unwrap();
        let m = Mask::from_fn(grid, |_, _, _| true);
        // First splitmix64(0) output is odd, so index 1 swaps with itself.
        assert_eq!(region_permutation(&m, 0), vec![[0, 0, 0], [1, 0, 0]]);
    }

    #[test]
    fn enumeration_is_zyx_ascending() {
        let grid = Grid::isotropic([5, 1, 1]).unwrap();
        let m = Mask::from_fn(grid, |_, _, _| true);
        assert_eq!(
            region_permutation(&m, 42),
            vec![[1, 0, 0], [2, 0, 0], [0, 0, 0], [4, 0, 0], [3, 0, 0]]
        );
    }

    #[test]
    fn sample_basics() {
        let m = cube(4, 0, 4);
        let none = HashSet::new();
        assert!(sample_prompts(&m, 0, 3, &none).is_empty());
        let three = sample_prompts(&m, 3, 9, &none);
        let five = sample_prompts(&m, 5, 9, &none);
        assert_eq!(three.voxels()[..], five.voxels()[..3]);

        let small = cube(4, 0, 1);
        let clamped = sample_prompts(&small.intersection(&cube(4, 0, 4)).unwrap(), 100, 1, &none);
        assert_eq!(clamped.len(), 1);
        assert!(matches!(
            clamped.warnings[0],
            SamplingWarning::ClampedCount {
                requested: 100,
                available: 1,
                ..
            }
        ));
    }

    #[test]
    fn sample_honors_exclusion() {
        let m = cube(3, 0, 3);
        let exclude: HashSet<Voxel> = region_permutation(&m, 5).into_iter().take(20).collect();
        let s = sample_prompts(&m, 27, 5, &exclude);
        assert_eq!(s.len(), 7);
        assert!(s.voxels().iter().all(|v| !exclude.contains(v)));
    }

    #[test]
    fn suggested_on_seven_cube() {
        let subs = decompose(&cube(9, 1, 8));
        let spec = StrategySpec::Cumulative {
            initial: Stage {
                region: RegionSet::WHOLE,
                count: 1,
            },
            cumulative: Stage {
                region: RegionSet::CENTER,
                count: 4,
            },
        };
        let ps = build_strategy_prompts(&spec, &subs, 11, 22).unwrap();
        let expected_initial = region_permutation(&subs.source, 11)[0];
        assert_eq!(ps.prompts[0].voxel, expected_initial);
        assert_eq!(ps.prompts[0].role, Role::Initial);
        if expected_initial == [4, 4, 4] {
            // The only center voxel is already taken.
            assert_eq!(ps.len(), 1);
        } else {
            assert_eq!(ps.len(), 2);
            assert_eq!(ps.prompts[1].voxel, [4, 4, 4]);
        }
        assert!(ps
            .warnings
            .iter()
            .any(|w| matches!(w, SamplingWarning::ClampedCount { requested: 4, .. })));
    }

    #[test]
    fn seed_roles_separate() {
        let subs = decompose(&cube(12, 1, 11));
        let stage = |region, count| Stage { region, count };
        let cumulative = StrategySpec::Cumulative {
            initial: stage(RegionSet::WHOLE, 1),
            cumulative: stage(RegionSet::CENTER, 4),
        };
        let a = build_strategy_prompts(&cumulative, &subs, 1, 100).unwrap();
        let b = build_strategy_prompts(&cumulative, &subs, 1, 200).unwrap();
        assert_eq!(a.prompts[0], b.prompts[0]);
        assert_ne!(a.voxels()[1..], b.voxels()[1..]);

        let initial = StrategySpec::InitialVaried {
            initial: stage(RegionSet::WHOLE, 1),
            cumulative: stage(RegionSet::CENTER, 4),
        };
        let a = build_strategy_prompts(&initial, &subs, 1, 100).unwrap();
        let b = build_strategy_prompts(&initial, &subs, 1, 200).unwrap();
        assert_eq!(a.voxels()[1..], b.voxels()[1..]);
        assert_ne!(a.prompts[0], b.prompts[0]);
        assert_eq!(a.prompts[0].role, Role::Initial);
    }

    #[test]
    fn empty_center_falls_back_to_margin() {
        // A 5-cube has B and M but no C.
        let subs = decompose(&cube(7, 1, 6));
        assert_eq!(subs.center.count(), 0);
        assert!(subs.margin.count() > 0);
        let spec = StrategySpec::RegionConstrained {
            region: RegionSet::CENTER,
            count: 2,
        };
        let ps = build_strategy_prompts(&spec, &subs, 0, 3).unwrap();
        assert_eq!(ps.len(), 2);
        assert!(ps.prompts.iter().all(|p| p.region == RegionSet::MARGIN));
        assert!(ps.voxels().iter().all(|&[x, y, z]| subs.margin.get(x, y, z)));
        assert_eq!(
            ps.warnings,
            vec![SamplingWarning::EmptyRegionFallback {
                requested: RegionSet::CENTER,
                used: RegionSet::MARGIN
            }]
        );
    }

    #[test]
    fn fallback_chain_order() {
        let chain = |r: RegionSet| fallback_candidates(r).collect::<Vec<_>>();
        assert_eq!(
            chain(RegionSet::CENTER),
            vec![RegionSet::CENTER, RegionSet::MARGIN, RegionSet::BOUNDARY, RegionSet::WHOLE]
        );
        assert_eq!(
            chain(RegionSet::MARGIN),
            vec![RegionSet::MARGIN, RegionSet::BOUNDARY, RegionSet::WHOLE]
        );
        assert_eq!(chain(RegionSet::BOUNDARY), vec![RegionSet::BOUNDARY, RegionSet::WHOLE]);
        let mc = RegionSet::new(false, true, true);
        assert_eq!(chain(mc), vec![mc, RegionSet::BOUNDARY, RegionSet::WHOLE]);
    }

    #[test]
    fn empty_source_is_an_error() {
        let subs = decompose(&cube(3, 0, 0));
        let spec = StrategySpec::RandomWhole { count: 1 };
        assert_eq!(
            build_strategy_prompts(&spec, &subs, 0, 0).unwrap_err(),
            SamplingError::EmptySource
        );
    }

    #[test]
    fn invalid_specs() {
        let subs = decompose(&cube(3, 0, 3));
        assert_eq!(
            build_strategy_prompts(&StrategySpec::RandomWhole { count: 0 }, &subs, 0, 0)
                .unwrap_err(),
            SamplingError::NoPrompts
        );
        let spec = StrategySpec::RegionConstrained {
            region: RegionSet::default(),
            count: 1,
        };
        assert_eq!(
            build_strategy_prompts(&spec, &subs, 0, 0).unwrap_err(),
            SamplingError::EmptyRegion
        );
    }

    #[test]
    fn prompt_set_json_schema() {
        let ps = PromptSet {
            seed: 7,
            prompts: vec![Prompt {
                voxel: [1, 2, 3],
                label: Label::Positive,
                role: Role::Initial,
                region: RegionSet::CENTER,
            }],
            warnings: vec![SamplingWarning::ClampedCount {
                region: RegionSet::CENTER,
                requested: 4,
                available: 1,
            }],
        };
        let v: serde_json::Value = serde_json::from_str(&ps.to_json()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "seed": 7,
                "prompts": [{"voxel": [1, 2, 3], "label": "pos", "role": "initial", "region": "C"}],
                "warnings": [{"kind": "clamped-count", "region": "C", "requested": 4, "available": 1}]
            })
        );
        let back: PromptSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, ps);
    }
}
