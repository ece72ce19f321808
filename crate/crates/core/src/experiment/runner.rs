//! Parallel, resumable execution of the experiment grid.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde_json::{json, Value};

use super::report::{render_table, Layout, TableFormat};
use super::{Backend, CellKey, ExperimentConfig, ExperimentError, ResultTable, RunRecord};
use crate::io;
use crate::metrics::evaluate;
use crate::sampling::{build_strategy_prompts, StrategySpec};
use crate::segmenter::{external_segment, ProtocolRequest, SyntheticOracle};
use crate::subregion::{decompose, SubRegions};
use crate::volume::{Mask, Volume3};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const META_FILE: &str = "run_meta.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 means available hardware parallelism.
    pub workers: usize,
    /// Recompute cells whose stored record is a failure.
    pub retry_failed: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            retry_failed: false,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub table: ResultTable,
    /// Cells computed by this invocation.
    pub computed: usize,
    /// Cells taken from an existing `results.jsonl`.
    pub reused: usize,
    /// Tables written to the output directory.
    pub tables: Vec<PathBuf>,
    /// Warnings emitted while rendering tables.
    pub warnings: Vec<String>,
}

struct Subject {
    case_id: String,
    image: Option<Volume3>,
    gt: Mask,
    regions: SubRegions,
    oracle: Option<SyntheticOracle>,
}

struct Cell {
    strategy: String,
    count: usize,
    spec: StrategySpec,
    seed: u64,
    subject: usize,
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Output(format!("{}: {e}", path.display()))
}

fn load_subjects(config: &ExperimentConfig) -> Result<Vec<Subject>, ExperimentError> {
    config
        .subjects
        .iter()
        .map(|s| {
            let fail = |message: String| ExperimentError::Subject {
                case_id: s.case_id.clone(),
                message,
            };
            let gt = io::load_mask(&s.gt).map_err(|e| fail(format!("{}: {e}", s.gt.display())))?;
            if gt.is_empty() {
                return Err(fail("ground-truth mask is empty".into()));
            }
            let image = match &s.image {
                Some(path) => {
                    let img =
                        io::load_volume(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
                    if img.dims() != gt.dims() {
                        return Err(fail(format!(
                            "image dims {:?} differ from ground-truth dims {:?}",
                            img.dims(),
                            gt.dims()
                        )));
                    }
                    Some(img)
                }
                None => None,
            };
            let oracle = match &config.backend {
                Backend::SyntheticOracle(params) => {
                    Some(SyntheticOracle::new(gt.clone(), *params).map_err(|e| fail(e.to_string()))?)
                }
                Backend::ExternalProcess(_) => None,
            };
            Ok(Subject {
                case_id: s.case_id.clone(),
                regions: decompose(&gt),
                image,
                gt,
                oracle,
            })
        })
        .collect()
}

fn grid_cells(config: &ExperimentConfig) -> Result<Vec<Cell>, ExperimentError> {
    let mut cells = Vec::new();
    for (i, def) in config.strategies.iter().enumerate() {
        for &count in def.counts(&config.prompt_counts) {
            let spec = def.resolve(count).map_err(|message| ExperimentError::Config {
                field: format!("strategies[{i}]"),
                message,
            })?;
            for &seed in &config.seeds {
                for subject in 0..config.subjects.len() {
                    cells.push(Cell {
                        strategy: def.name.clone(),
                        count,
                        spec,
                        seed,
                        subject,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn run_cell(config: &ExperimentConfig, subject: &Subject, cell: &Cell) -> RunRecord {
    let mut record = RunRecord {
        strategy: cell.strategy.clone(),
        count: cell.count,
        seed: cell.seed,
        case_id: subject.case_id.clone(),
        spec: cell.spec,
        metrics: None,
        warnings: Vec::new(),
        prompts: Vec::new(),
        error: None,
    };
    let prompts = match build_strategy_prompts(&cell.spec, &subject.regions, config.fixed_seed, cell.seed) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(format!("sampling: {e}"));
            return record;
        }
    };
    record.prompts = prompts.voxels();
    record.warnings = prompts.warnings.clone();

    let pred = match &config.backend {
        Backend::SyntheticOracle(_) => subject
            .oracle
            .as_ref()
            .expect("oracle built for synthetic backend")
            .segment(&prompts)
            .map_err(|e| format!("segment: {e}")),
        Backend::ExternalProcess(command) => {
            let workdir = config
                .output_dir
                .join("work")
                .join(sanitize(&cell.strategy))
                .join(cell.count.to_string())
                .join(cell.seed.to_string())
                .join(sanitize(&subject.case_id));
            let request = ProtocolRequest {
                tau_mm: config.tau_mm,
                case_id: subject.case_id.clone(),
            };
            let image = subject.image.as_ref().expect("validated: external needs images");
            let result = external_segment(image, &prompts, command, &workdir, &request, Some(&subject.gt));
            if result.is_ok() && !config.keep_workdirs {
                let _ = fs::remove_dir_all(&workdir);
            }
            result.map_err(|e| format!("segment: {e}"))
        }
    };
    match pred.and_then(|p| evaluate(&p, &subject.gt, config.tau_mm).map_err(|e| format!("metrics: {e}"))) {
        Ok(m) => record.metrics = Some(m),
        Err(e) => record.error = Some(e),
    }
    record
}

/// Reads a JSON-lines results file. A truncated final line (from an
/// interrupted run) is ignored; any other malformed line is an error.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, ExperimentError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| out_err(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| out_err(path, e))?;
    let mut records = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if i == last => {}
            Err(e) => {
                return Err(ExperimentError::Results(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(records)
}

/// Writes records as JSON lines in canonical (strategy, count, seed,
/// case_id) order.
pub fn write_records(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.key());
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(|e| out_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for r in sorted {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| out_err(&tmp, e))?;
        }
        w.flush().map_err(|e| out_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| out_err(path, e))
}

fn check_meta(config: &ExperimentConfig, dir: &Path) -> Result<(), ExperimentError> {
    let meta_path = dir.join(META_FILE);
    let fingerprint = config.fingerprint();
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| out_err(&meta_path, e))?;
        let stored: Value = serde_json::from_str(&text).map_err(|e| out_err(&meta_path, e))?;
        if stored.get("config") != Some(&fingerprint) {
            return Err(ExperimentError::Output(format!(
                "{} holds results of a different configuration; use a fresh output_dir",
                dir.display()
            )));
        }
        return Ok(());
    }
    if dir.join(RESULTS_FILE).exists() {
        return Err(ExperimentError::Output(format!(
            "{} has {RESULTS_FILE} but no {META_FILE}; refusing to mix results",
            dir.display()
        )));
    }
    let meta = json!({ "config": fingerprint });
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| out_err(&meta_path, e))
}

/// Table files rendered for a result set: a summary always, plus each
/// table layout that has at least one matching cell.
pub fn write_tables(
    table: &ResultTable,
    dir: &Path,
) -> Result<(Vec<PathBuf>, Vec<String>), ExperimentError> {
    let mut written = Vec::new();
    let mut warnings = Vec::new();
    for (layout, stem) in [
        (Layout::Summary, "summary"),
        (Layout::Table1, "table1"),
        (Layout::Table2, "table2"),
        (Layout::Table3, "table3"),
    ] {
        if layout != Layout::Summary && !layout.has_cells(table) {
            continue;
        }
        for (format, ext) in [(TableFormat::Markdown, "md"), (TableFormat::Csv, "csv")] {
            let rendered = render_table(table, layout, format);
            if format == TableFormat::Markdown {
                warnings.extend(rendered.warnings.iter().map(|w| format!("{stem}: {w}")));
            }
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, rendered.text).map_err(|e| out_err(&path, e))?;
            written.push(path);
        }
    }
    Ok((written, warnings))
}

/// Runs every pending cell of the grid, then aggregates and writes
/// `results.jsonl`, `aggregate.json` and the rendered tables.
///
/// Records already present in the output directory are reused, so an
/// interrupted run resumes where it stopped and a completed run recomputes
/// nothing. The output is independent of the worker count.
pub fn run_experiment(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<RunOutcome, ExperimentError> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    check_meta(config, dir)?;
    let subjects = load_subjects(config)?;
    let cells = grid_cells(config)?;

    let results_path = dir.join(RESULTS_FILE);
    let existing = if results_path.exists() {
        read_records(&results_path)?
    } else {
        Vec::new()
    };
    let wanted: HashSet<CellKey> = cells
        .iter()
        .map(|c| CellKey {
            strategy: c.strategy.clone(),
            count: c.count,
            seed: c.seed,
            case_id: subjects[c.subject].case_id.clone(),
        })
        .collect();
    let mut kept: Vec<RunRecord> = Vec::new();
    let mut done: HashSet<CellKey> = HashSet::new();
    for r in existing {
        let key = r.key();
        if !wanted.contains(&key) || (options.retry_failed && r.is_failed()) {
            continue;
        }
        if done.insert(key) {
            kept.push(r);
        }
    }
    let reused = kept.len();
    let pending: Vec<&Cell> = cells
        .iter()
        .filter(|c| {
            !done.contains(&CellKey {
                strategy: c.strategy.clone(),
                count: c.count,
                seed: c.seed,
                case_id: subjects[c.subject].case_id.clone(),
            })
        })
        .collect();

    // Rewrite the kept records so retried or stale lines disappear, then
    // append new records as they complete.
    write_records(&results_path, &kept)?;
    let sink_file = OpenOptions::new()
        .append(true)
        .open(&results_path)
        .map_err(|e| out_err(&results_path, e))?;
    let sink = Mutex::new((sink_file, Vec::with_capacity(pending.len())));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| ExperimentError::Output(format!("thread pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().try_for_each(|cell| {
            let record = run_cell(config, &subjects[cell.subject], cell);
            let line = serde_json::to_string(&record).expect("record serializes");
            let mut guard = sink.lock().expect("sink lock");
            let (file, records) = &mut *guard;
            writeln!(file, "{line}").map_err(|e| out_err(&results_path, e))?;
            records.push(record);
            Ok::<(), ExperimentError>(())
        })
    })?;
    let (_, fresh) = sink.into_inner().expect("sink lock");
    let computed = fresh.len();

    let mut records = kept;
    records.extend(fresh);
    records.sort_by_key(|r| r.key());
    write_records(&results_path, &records)?;

    let table = ResultTable::from_records(records, config)?;
    let agg_path = dir.join(AGGREGATE_FILE);
    let text = serde_json::to_string_pretty(&table).expect("aggregate serializes");
    fs::write(&agg_path, text + "\n").map_err(|e| out_err(&agg_path, e))?;
    let (tables, warnings) = write_tables(&table, dir)?;

    Ok(RunOutcome {
        table,
        computed,
        reused,
        tables,
        warnings,
    })
}
