//! Strategy × prompt-count × seed × subject grids, their aggregation and
//! reporting.
//!
//! Aggregation follows the run-based convention: for each (strategy,
//! count) the per-seed mean over subjects is one run, and the reported
//! value is the mean and population standard deviation over runs.

mod config;
mod report;
mod runner;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    default_dice_bins, region_strategies, suggested_strategy, AggregationMode, Backend, CellRef,
    CountRule, ExperimentConfig, InitialStageDef, Pairing, RegionStageDef, StrategyDef,
    StrategyKindDef, SubjectSpec, DEFAULT_NUM_SEEDS, DEFAULT_PROMPT_COUNTS,
};
pub use report::{format_mean_std, render_table, Layout, RenderedTable, TableFormat};
pub use runner::{
    read_records, run_experiment, write_records, write_tables, RunOptions, RunOutcome, AGGREGATE_FILE,
    META_FILE, RESULTS_FILE,
};

use crate::metrics::MetricRecord;
use crate::sampling::{SamplingWarning, StrategySpec, Voxel};
use crate::stats::{mean, paired_ttest, population_std, TTest};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("subject {case_id}: {message}")]
    Subject { case_id: String, message: String },
    #[error("{0}")]
    Output(String),
    #[error("invalid dice bin edges: {0}")]
    BinEdges(String),
    #[error("results: {0}")]
    Results(String),
}

/// Outcome of one (strategy, count, seed, subject) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub count: usize,
    pub seed: u64,
    pub case_id: String,
    pub spec: StrategySpec,
    pub metrics: Option<MetricRecord>,
    pub warnings: Vec<SamplingWarning>,
    pub prompts: Vec<Voxel>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            strategy: self.strategy.clone(),
            count: self.count,
            seed: self.seed,
            case_id: self.case_id.clone(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.metrics.is_none()
    }
}

/// Canonical ordering key of a grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub strategy: String,
    pub count: usize,
    pub seed: u64,
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// One value per aggregation unit (seed, or subject in per-subject mode).
    pub run_means: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `run_means`.
    pub std: f64,
}

impl Summary {
    fn of(values: Vec<f64>) -> Self {
        let (m, s) = if values.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (mean(&values), population_std(&values))
        };
        Self {
            run_means: values,
            mean: m,
            std: s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub strategy: String,
    pub count: usize,
    pub spec: StrategySpec,
    /// Aggregation units aligned with `run_means` (seeds or case ids).
    pub units: Vec<String>,
    pub dice: Summary,
    pub nsd: Summary,
    pub failed_cells: usize,
}

impl AggregateStats {
    pub fn cell(&self) -> CellRef {
        CellRef {
            strategy: self.strategy.clone(),
            count: self.count,
        }
    }
}

fn unit_means(
    records: &[&RunRecord],
    mode: AggregationMode,
    metric: impl Fn(&MetricRecord) -> f64,
) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(m) = &r.metrics {
            let key = match mode {
                AggregationMode::PerRun => (r.seed, String::new()),
                AggregationMode::PerSubject => (0, r.case_id.clone()),
            };
            groups.entry(key).or_default().push(metric(m));
        }
    }
    groups
        .into_iter()
        .map(|((seed, case), values)| {
            let unit = match mode {
                AggregationMode::PerRun => seed.to_string(),
                AggregationMode::PerSubject => case,
            };
            (unit, mean(&values))
        })
        .collect()
}

fn group_cells(records: &[RunRecord]) -> BTreeMap<(String, usize), Vec<&RunRecord>> {
    let mut cells: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.strategy.clone(), r.count))
            .or_default()
            .push(r);
    }
    for group in cells.values_mut() {
        group.sort_by_key(|r| r.key());
    }
    cells
}

/// Aggregates records per (strategy, count). Units are ordered by seed
/// (or case id); failed cells are excluded and counted.
pub fn aggregate(records: &[RunRecord], mode: AggregationMode) -> Vec<AggregateStats> {
    group_cells(records)
        .into_iter()
        .map(|((strategy, count), group)| {
            let dice = unit_means(&group, mode, |m| m.dice);
            let nsd = unit_means(&group, mode, |m| m.nsd);
            // Seeds sort numerically, not as strings.
            let mut units: Vec<String> = dice.keys().cloned().collect();
            if mode == AggregationMode::PerRun {
                units.sort_by_key(|u| u.parse::<u64>().unwrap_or(u64::MAX));
            }
            let pick = |m: &BTreeMap<String, f64>| units.iter().map(|u| m[u]).collect::<Vec<_>>();
            AggregateStats {
                spec: group[0].spec,
                dice: Summary::of(pick(&dice)),
                nsd: Summary::of(pick(&nsd)),
                failed_cells: group.iter().filter(|r| r.is_failed()).count(),
                units,
                strategy,
                count,
            }
        })
        .collect()
}

/// Paired t-test of one cell's Dice against the baseline cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub strategy: String,
    pub count: usize,
    pub baseline: CellRef,
    pub pairing: Pairing,
    pub mean_diff: f64,
    pub test: Option<TTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Paired Dice t-tests of every cell against `baseline`, pairing per-run
/// means by seed or per-subject means by case id.
pub fn compare_to_baseline(
    records: &[RunRecord],
    baseline: &CellRef,
    pairing: Pairing,
) -> Vec<Comparison> {
    let mode = match pairing {
        Pairing::Runs => AggregationMode::PerRun,
        Pairing::Subjects => AggregationMode::PerSubject,
    };
    let cells = group_cells(records);
    let Some(base) = cells.get(&(baseline.strategy.clone(), baseline.count)) else {
        return Vec::new();
    };
    let base_means = unit_means(base, mode, |m| m.dice);
    cells
        .iter()
        .filter(|((s, c), _)| !(s == &baseline.strategy && *c == baseline.count))
        .map(|((strategy, count), group)| {
            let means = unit_means(group, mode, |m| m.dice);
            let shared: Vec<&String> = means.keys().filter(|k| base_means.contains_key(*k)).collect();
            let a: Vec<f64> = shared.iter().map(|k| means[*k]).collect();
            let b: Vec<f64> = shared.iter().map(|k| base_means[*k]).collect();
            let (test, note) = match paired_ttest(&a, &b) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Comparison {
                strategy: strategy.clone(),
                count: *count,
                baseline: baseline.clone(),
                pairing,
                mean_diff: if a.is_empty() {
                    f64::NAN
                } else {
                    mean(&a) - mean(&b)
                },
                test,
                note,
            }
        })
        .collect()
}

/// Per-method subject counts and mean Dice within one Dice bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCell {
    pub count: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceBin {
    pub lo: f64,
    pub hi: f64,
    /// Keyed by `"<strategy>@<count>"`.
    pub methods: BTreeMap<String, BinCell>,
}

impl DiceBin {
    pub fn count(&self, method: &str) -> usize {
        self.methods.get(method).map_or(0, |c| c.count)
    }
}

pub fn method_label(strategy: &str, count: usize) -> String {
    format!("{strategy}@{count}")
}

pub(crate) fn check_bin_edges(edges: &[f64]) -> Result<(), ExperimentError> {
    if edges.len() < 2 {
        return Err(ExperimentError::BinEdges("need at least two edges".into()));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ExperimentError::BinEdges("edges must be strictly ascending".into()));
    }
    if edges[0] > 0.0 || edges[edges.len() - 1] < 1.0 {
        return Err(ExperimentError::BinEdges("edges must cover [0, 1]".into()));
    }
    Ok(())
}

/// Histogram of per-subject mean Dice for every method. Bins are half-open
/// `[lo, hi)` except the last, which is closed.
pub fn group_by_dice(
    records: &[RunRecord],
    bin_edges: &[f64],
) -> Result<Vec<DiceBin>, ExperimentError> {
    check_bin_edges(bin_edges)?;
    let mut bins: Vec<DiceBin> = bin_edges
        .windows(2)
        .map(|w| DiceBin {
            lo: w[0],
            hi: w[1],
            methods: BTreeMap::new(),
        })
        .collect();
    let last = bins.len() - 1;
    let mut sums: Vec<BTreeMap<String, (usize, f64)>> = vec![BTreeMap::new(); bins.len()];
    for ((strategy, count), group) in group_cells(records) {
        let label = method_label(&strategy, count);
        for value in unit_means(&group, AggregationMode::PerSubject, |m| m.dice).into_values() {
            let slot = bins
                .iter()
                .position(|b| value >= b.lo && value < b.hi)
                .or_else(|| (value == bins[last].hi).then_some(last));
            if let Some(i) = slot {
                let e = sums[i].entry(label.clone()).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += value;
            }
        }
    }
    for (bin, acc) in bins.iter_mut().zip(sums) {
        bin.methods = acc
            .into_iter()
            .map(|(k, (n, s))| {
                (
                    k,
                    BinCell {
                        count: n,
                        mean_dice: s / n as f64,
                    },
                )
            })
            .collect();
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMeta {
    pub backend: Backend,
    pub tau_mm: f64,
    pub num_seeds: usize,
    pub num_subjects: usize,
    pub fixed_seed: u64,
    pub aggregation: AggregationMode,
    pub std_convention: String,
    pub ttest_convention: String,
}

/// Aggregated results of a grid run; serialized as `aggregate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub meta: ResultMeta,
    pub aggregates: Vec<AggregateStats>,
    pub comparisons: Vec<Comparison>,
    pub dice_groups: Vec<DiceBin>,
    pub failed_cells: usize,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl ResultTable {
    pub fn from_records(records: Vec<RunRecord>, config: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let aggregates = aggregate(&records, config.aggregation);
        let comparisons = config
            .baseline
            .as_ref()
            .map(|b| compare_to_baseline(&records, b, config.ttest_pairing))
            .unwrap_or_default();
        let dice_groups = group_by_dice(&records, &config.dice_bins)?;
        let subjects: BTreeSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
        Ok(Self {
            meta: ResultMeta {
                backend: config.backend.clone(),
                tau_mm: config.tau_mm,
                num_seeds: config.seeds.len(),
                num_subjects: subjects.len(),
                fixed_seed: config.fixed_seed,
                aggregation: config.aggregation,
                std_convention: "population (divide by n) over run means".into(),
                ttest_convention: "two-tailed paired, sample std (divide by n-1) of differences"
                    .into(),
            },
            failed_cells: records.iter().filter(|r| r.is_failed()).count(),
            aggregates,
            comparisons,
            dice_groups,
            records,
        })
    }

    /// Aggregates only, for reporting from a bare results file.
    pub fn from_records_only(records: Vec<RunRecord>, backend: Backend, tau_mm: f64) -> Self {
        let aggregates = aggregate(&records, AggregationMode::PerRun);
        let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
        let subjects: BTreeSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
        Self {
            meta: ResultMeta {
                backend,
                tau_mm,
                num_seeds: seeds.len(),
                num_subjects: subjects.len(),
                fixed_seed: 0,
                aggregation: AggregationMode::PerRun,
                std_convention: "population (divide by n) over run means".into(),
                ttest_convention: "two-tailed paired, sample std (divide by n-1) of differences"
                    .into(),
            },
            failed_cells: records.iter().filter(|r| r.is_failed()).count(),
            aggregates,
            comparisons: Vec::new(),
            dice_groups: Vec::new(),
            records,
        }
    }

    pub fn get(&self, strategy: &str, count: usize) -> Option<&AggregateStats> {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy && a.count == count)
    }
}
