//! Experiment configuration (JSON) and strategy definitions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ExperimentError;
use crate::rng::derive_seeds;
use crate::sampling::{Stage, StrategySpec};
use crate::segmenter::{ExternalCommand, OracleParams};
use crate::subregion::RegionSet;

pub const DEFAULT_PROMPT_COUNTS: [usize; 5] = [1, 5, 10, 20, 100];
pub const DEFAULT_NUM_SEEDS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub gt: PathBuf,
}

/// Initial-stage prompt count: a fixed number, or `[total, initial]` pairs
/// giving the initial count for each total prompt count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountRule {
    Fixed(usize),
    Schedule(Vec<[usize; 2]>),
}

impl CountRule {
    pub fn initial_for(&self, total: usize) -> Option<usize> {
        match self {
            CountRule::Fixed(n) => Some(*n),
            CountRule::Schedule(pairs) => pairs.iter().find(|p| p[0] == total).map(|p| p[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStageDef {
    pub region: RegionSet,
    pub count: CountRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionStageDef {
    pub region: RegionSet,
}

/// Strategy kinds as written in the config. The grid's prompt count is the
/// total; two-stage kinds give the initial count and the cumulative stage
/// takes the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategyKindDef {
    RandomWhole,
    RegionConstrained {
        region: RegionSet,
    },
    Cumulative {
        initial: InitialStageDef,
        cumulative: RegionStageDef,
    },
    InitialVaried {
        initial: InitialStageDef,
        cumulative: RegionStageDef,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: StrategyKindDef,
    /// Overrides the experiment-wide prompt counts for this strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
}

impl StrategyDef {
    pub fn new(name: impl Into<String>, kind: StrategyKindDef) -> Self {
        Self {
            name: name.into(),
            kind,
            counts: None,
        }
    }

    pub fn counts<'a>(&'a self, default: &'a [usize]) -> &'a [usize] {
        self.counts.as_deref().unwrap_or(default)
    }

    /// The concrete strategy for `total` prompts.
    pub fn resolve(&self, total: usize) -> Result<StrategySpec, String> {
        let staged = |initial: &InitialStageDef, cumulative: &RegionStageDef| {
            let n_init = initial
                .count
                .initial_for(total)
                .ok_or_else(|| format!("no initial count scheduled for {total} prompts"))?;
            if n_init == 0 || n_init >= total {
                return Err(format!(
                    "initial count {n_init} must be in 1..{total} for {total} prompts"
                ));
            }
            Ok((
                Stage {
                    region: initial.region,
                    count: n_init,
                },
                Stage {
                    region: cumulative.region,
                    count: total - n_init,
                },
            ))
        };
        if total == 0 {
            return Err("prompt count must be at least 1".into());
        }
        Ok(match &self.kind {
            StrategyKindDef::RandomWhole => StrategySpec::RandomWhole { count: total },
            StrategyKindDef::RegionConstrained { region } => StrategySpec::RegionConstrained {
                region: *region,
                count: total,
            },
            StrategyKindDef::Cumulative {
                initial,
                cumulative,
            } => {
                let (initial, cumulative) = staged(initial, cumulative)?;
                StrategySpec::Cumulative {
                    initial,
                    cumulative,
                }
            }
            StrategyKindDef::InitialVaried {
                initial,
                cumulative,
            } => {
                let (initial, cumulative) = staged(initial, cumulative)?;
                StrategySpec::InitialVaried {
                    initial,
                    cumulative,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    SyntheticOracle(OracleParams),
    ExternalProcess(ExternalCommand),
}

/// How per-cell metrics are reduced to the reported mean±std.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Mean over subjects per seed, then mean±std over seeds.
    #[default]
    PerRun,
    /// Mean over seeds per subject, then mean±std over subjects.
    PerSubject,
}

/// Which per-unit means the paired t-test pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    #[default]
    Runs,
    Subjects,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub strategy: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub subjects: Vec<SubjectSpec>,
    pub strategies: Vec<StrategyDef>,
    pub prompt_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub fixed_seed: u64,
    pub backend: Backend,
    pub tau_mm: f64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<CellRef>,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub ttest_pairing: Pairing,
    pub dice_bins: Vec<f64>,
    #[serde(default)]
    pub keep_workdirs: bool,
}

/// Width-0.1 bins over [0, 1].
pub fn default_dice_bins() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

fn field<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    name: &str,
) -> Result<Option<T>, ExperimentError> {
    obj.get(name)
        .map(|v| {
            serde_json::from_value(v.clone()).map_err(|e| ExperimentError::Config {
                field: name.to_string(),
                message: e.to_string(),
            })
        })
        .transpose()
}

fn required<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    name: &str,
) -> Result<T, ExperimentError> {
    field(obj, name)?.ok_or_else(|| ExperimentError::Config {
        field: name.to_string(),
        message: "missing required field".into(),
    })
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        message: message.into(),
    }
}

const KNOWN_FIELDS: &[&str] = &[
    "subjects",
    "strategies",
    "prompt_counts",
    "seeds",
    "master_seed",
    "num_seeds",
    "fixed_seed",
    "backend",
    "tau_mm",
    "output_dir",
    "baseline",
    "aggregation",
    "ttest_pairing",
    "dice_bins",
    "keep_workdirs",
];

impl ExperimentConfig {
    /// Parses a config, resolving relative paths against `base_dir`.
    ///
    /// Seeds come from `seeds` when given, otherwise `num_seeds` (default
    /// 50) values of a splitmix64 stream seeded with `master_seed`
    /// (default 0). `fixed_seed` defaults to the next value of that stream.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| config_err("<root>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| config_err("<root>", "config must be a JSON object"))?;
        if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            return Err(config_err(unknown.clone(), "unknown field"));
        }

        let subjects: Vec<SubjectSpec> = required(obj, "subjects")?;

        let raw_strategies: Vec<Value> = required(obj, "strategies")?;
        let mut strategies = Vec::with_capacity(raw_strategies.len());
        for (i, raw) in raw_strategies.into_iter().enumerate() {
            let kind_path = format!("strategies[{i}].kind");
            if let Some(kind) = raw.get("kind").and_then(Value::as_str) {
                const KINDS: [&str; 4] = [
                    "random-whole",
                    "region-constrained",
                    "cumulative",
                    "initial-varied",
                ];
                if !KINDS.contains(&kind) {
                    return Err(config_err(
                        kind_path,
                        format!("unknown strategy kind {kind:?}; expected one of {KINDS:?}"),
                    ));
                }
            } else {
                return Err(config_err(kind_path, "missing strategy kind"));
            }
            let def: StrategyDef = serde_json::from_value(raw)
                .map_err(|e| config_err(format!("strategies[{i}]"), e.to_string()))?;
            strategies.push(def);
        }

        let prompt_counts: Vec<usize> =
            field(obj, "prompt_counts")?.unwrap_or_else(|| DEFAULT_PROMPT_COUNTS.to_vec());
        let master_seed: u64 = field(obj, "master_seed")?.unwrap_or(0);
        let num_seeds: usize = field(obj, "num_seeds")?.unwrap_or(DEFAULT_NUM_SEEDS);
        let stream = derive_seeds(master_seed, num_seeds + 1);
        let seeds: Vec<u64> =
            field(obj, "seeds")?.unwrap_or_else(|| stream[..num_seeds].to_vec());
        let fixed_seed: u64 = field(obj, "fixed_seed")?.unwrap_or(stream[num_seeds]);
        let backend: Backend = required(obj, "backend")?;
        let tau_mm: f64 = field(obj, "tau_mm")?.unwrap_or(crate::metrics::DEFAULT_TAU_MM);
        let output_dir: PathBuf = required(obj, "output_dir")?;

        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let config = ExperimentConfig {
            subjects: subjects
                .into_iter()
                .map(|s| SubjectSpec {
                    image: s.image.map(resolve),
                    gt: resolve(s.gt),
                    case_id: s.case_id,
                })
                .collect(),
            strategies,
            prompt_counts,
            seeds,
            fixed_seed,
            backend,
            tau_mm,
            output_dir: resolve(output_dir),
            baseline: field(obj, "baseline")?,
            aggregation: field(obj, "aggregation")?.unwrap_or_default(),
            ttest_pairing: field(obj, "ttest_pairing")?.unwrap_or_default(),
            dice_bins: field(obj, "dice_bins")?.unwrap_or_else(default_dice_bins),
            keep_workdirs: field(obj, "keep_workdirs")?.unwrap_or(false),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.subjects.is_empty() {
            return Err(config_err("subjects", "at least one subject is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, s) in self.subjects.iter().enumerate() {
            if !ids.insert(&s.case_id) {
                return Err(config_err(
                    format!("subjects[{i}].case_id"),
                    format!("duplicate case id {:?}", s.case_id),
                ));
            }
        }
        if self.strategies.is_empty() {
            return Err(config_err("strategies", "at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(config_err("seeds", "seeds must be distinct"));
        }
        if self.prompt_counts.iter().any(|&c| c == 0) {
            return Err(config_err("prompt_counts", "all counts must be >= 1"));
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.strategies.iter().enumerate() {
            if !names.insert(&s.name) {
                return Err(config_err(
                    format!("strategies[{i}].name"),
                    format!("duplicate strategy name {:?}", s.name),
                ));
            }
            for &count in s.counts(&self.prompt_counts) {
                s.resolve(count)
                    .and_then(|spec| spec.validate().map_err(|e| e.to_string()))
                    .map_err(|m| config_err(format!("strategies[{i}]"), m))?;
            }
        }
        if !(self.tau_mm >= 0.0 && self.tau_mm.is_finite()) {
            return Err(config_err("tau_mm", "tolerance must be finite and >= 0"));
        }
        match &self.backend {
            Backend::SyntheticOracle(p) => p
                .validate()
                .map_err(|e| config_err("backend", e.to_string()))?,
            Backend::ExternalProcess(cmd) => {
                if cmd.command.is_empty() {
                    return Err(config_err("backend.command", "command is empty"));
                }
                if let Some((i, _)) = self
                    .subjects
                    .iter()
                    .enumerate()
                    .find(|(_, s)| s.image.is_none())
                {
                    return Err(config_err(
                        format!("subjects[{i}].image"),
                        "external backends need an image for every subject",
                    ));
                }
            }
        }
        if let Some(b) = &self.baseline {
            let Some(def) = self.strategies.iter().find(|s| s.name == b.strategy) else {
                return Err(config_err("baseline.strategy", format!("no strategy named {:?}", b.strategy)));
            };
            if !def.counts(&self.prompt_counts).contains(&b.count) {
                return Err(config_err("baseline.count", format!("{:?} has no {}-prompt cell", b.strategy, b.count)));
            }
        }
        super::check_bin_edges(&self.dice_bins).map_err(|e| config_err("dice_bins", e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON of everything that determines results; used to
    /// detect reuse of an output directory with a different grid.
    pub fn fingerprint(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("keep_workdirs");
        }
        v
    }
}

/// Table 1 rows: the seven region selections as region-constrained strategies.
pub fn region_strategies() -> Vec<StrategyDef> {
    RegionSet::table_rows()
        .into_iter()
        .map(|region| {
            if region.is_whole() {
                StrategyDef::new("whole", StrategyKindDef::RandomWhole)
            } else {
                StrategyDef::new(
                    format!("region {region}"),
                    StrategyKindDef::RegionConstrained { region },
                )
            }
        })
        .collect()
}

/// One random point in the whole mask plus cumulative points from the center.
pub fn suggested_strategy() -> StrategyDef {
    StrategyDef::new(
        "suggested",
        StrategyKindDef::Cumulative {
            initial: InitialStageDef {
                region: RegionSet::WHOLE,
                count: CountRule::Fixed(1),
            },
            cumulative: RegionStageDef {
                region: RegionSet::CENTER,
            },
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(strategies: &str) -> String {
        format!(
            r#"{{
                "subjects": [{{"case_id": "a", "gt": "a.nii"}}],
                "strategies": {strategies},
                "num_seeds": 2,
                "backend": {{"kind": "synthetic-oracle", "r_base": 1.0, "alpha": 1.0}},
                "output_dir": "out"
            }}"#
        )
    }

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_json_str(
            &minimal(r#"[{"name": "baseline", "kind": "random-whole", "counts": [1]}]"#),
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(cfg.seeds, derive_seeds(0, 2));
        assert_eq!(cfg.fixed_seed, derive_seeds(0, 3)[2]);
        assert_eq!(cfg.subjects[0].gt, PathBuf::from("/data/a.nii"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/out"));
        assert_eq!(cfg.tau_mm, 1.0);
        assert_eq!(cfg.prompt_counts, DEFAULT_PROMPT_COUNTS);
        assert_eq!(cfg.dice_bins.len(), 11);
    }

    #[test]
    fn unknown_kind_names_the_field() {
        let err = ExperimentConfig::from_json_str(
            &minimal(r#"[{"name": "x", "kind": "lasso"}]"#),
            Path::new("."),
        )
        .unwrap_err();
        match err {
            ExperimentError::Config { field, message } => {
                assert_eq!(field, "strategies[0].kind");
                assert!(message.contains("lasso"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_fields() {
        let bad_region = minimal(r#"[{"name": "x", "kind": "region-constrained", "region": "Q"}]"#);
        assert!(matches!(
            ExperimentConfig::from_json_str(&bad_region, Path::new(".")),
            Err(ExperimentError::Config { field, .. }) if field == "strategies[0]"
        ));
        let extra = minimal("[]").replace("\"num_seeds\"", "\"bogus\": 1, \"num_seeds\"");
        assert!(matches!(
            ExperimentConfig::from_json_str(&extra, Path::new(".")),
            Err(ExperimentError::Config { field, .. }) if field == "bogus"
        ));
        let empty = minimal("[]");
        assert!(matches!(
            ExperimentConfig::from_json_str(&empty, Path::new(".")),
            Err(ExperimentError::Config { field, .. }) if field == "strategies"
        ));
        // Initial count must leave room for cumulative prompts.
        let staged = minimal(
            r#"[{"name": "s", "kind": "cumulative", "counts": [1],
                 "initial": {"region": "whole", "count": 1}, "cumulative": {"region": "C"}}]"#,
        );
        assert!(ExperimentConfig::from_json_str(&staged, Path::new(".")).is_err());
    }

    #[test]
    fn staged_resolution() {
        let def = StrategyDef::new(
            "cumu C",
            StrategyKindDef::Cumulative {
                initial: InitialStageDef {
                    region: RegionSet::WHOLE,
                    count: CountRule::Schedule(vec![[5, 1], [10, 5], [20, 10], [100, 20]]),
                },
                cumulative: RegionStageDef {
                    region: RegionSet::CENTER,
                },
            },
        );
        let spec = def.resolve(100).unwrap();
        assert_eq!(
            spec,
            StrategySpec::Cumulative {
                initial: Stage {
                    region: RegionSet::WHOLE,
                    count: 20
                },
                cumulative: Stage {
                    region: RegionSet::CENTER,
                    count: 80
                },
            }
        );
        assert!(def.resolve(7).is_err());
        assert_eq!(suggested_strategy().resolve(5).unwrap().total_count(), 5);
    }

    #[test]
    fn strategy_def_json_shape() {
        let v = serde_json::to_value(suggested_strategy()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "name": "suggested",
                "kind": "cumulative",
                "initial": {"region": "whole", "count": 1},
                "cumulative": {"region": "C"}
            })
        );
        let back: StrategyDef = serde_json::from_value(v).unwrap();
        assert_eq!(back, suggested_strategy());
    }
}
