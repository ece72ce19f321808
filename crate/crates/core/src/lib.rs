//! Evaluation harness for test-time point-prompt selection in interactive
//! volumetric segmentation.
//!
//! The pipeline for a single grid cell is: decompose the ground-truth mask
//! into boundary/margin/center sub-regions ([`subregion`]), draw seeded
//! prompts under a selection strategy ([`sampling`]), segment with a
//! pluggable backend ([`segmenter`]), and score with Dice and normalized
//! surface Dice ([`metrics`]). [`experiment`] runs the full
//! strategy × count × seed × subject grid and aggregates mean±std over runs.

pub mod experiment;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod segmenter;
pub mod stats;
pub mod subregion;
pub mod volume;

pub use experiment::{ExperimentConfig, ResultTable, RunRecord};
pub use metrics::{dice, edt, nsd, surface_voxels, MetricRecord};
pub use sampling::{Prompt, PromptSet, StrategySpec};
pub use subregion::{avg_pool, decompose, union_region, RegionSet, SubRegions};
pub use volume::{Grid, Mask, Volume3, VolumeError};
