//! `promptbench`: decompose masks, sample prompts, segment, score, and run
//! or report whole experiment grids.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 backend or
//! protocol failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use promptbench_core::experiment::{
    read_records, render_table, run_experiment, AggregationMode, Backend, ExperimentConfig, Layout, ResultTable, RunOptions, TableFormat,
};
use promptbench_core::io::{self, Format};
use promptbench_core::metrics::{evaluate, DEFAULT_TAU_MM};
use promptbench_core::phantom::{self, PhantomParams};
use promptbench_core::rng::derive_seeds;
use promptbench_core::sampling::{build_strategy_prompts, PromptSet, StrategySpec};
use promptbench_core::segmenter::{external_segment, OracleParams, ProtocolRequest, SyntheticOracle};
use promptbench_core::subregion::{decompose, RegionSet};
use promptbench_core::volume::Mask;

#[derive(Debug, Parser)]
#[command(name = "promptbench", version, about = "Point-prompt selection harness for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a ground-truth mask into boundary, margin and center sub-regions.
    Decompose(DecomposeArgs),
    /// Draw seeded prompts for one strategy and write them as JSON.
    Sample(SampleArgs),
    /// Segment with the synthetic oracle or an external command.
    Segment(SegmentArgs),
    /// Score a predicted mask against ground truth (Dice and NSD).
    Evaluate(EvaluateArgs),
    /// Run a full experiment grid from a JSON config.
    Run(RunArgs),
    /// Render a results file as a table.
    Report(ReportArgs),
    /// Generate seeded synthetic phantom subjects.
    Phantoms(PhantomArgs),
    /// Reference external segmenter implementing the file protocol.
    ProtocolOracle(ProtocolArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FileFormat {
    Nii,
    Raw,
}

impl FileFormat {
    fn format(self) -> Format {
        match self {
            FileFormat::Nii => Format::Nifti,
            FileFormat::Raw => Format::Raw,
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// Ground-truth mask (.nii or .raw with .json sidecar).
    #[arg(long)]
    gt: PathBuf,
    /// Directory for boundary/margin/center masks and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// File format of the written masks.
    #[arg(long, value_enum, default_value = "nii")]
    format: FileFormat,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Ground-truth mask the prompts are drawn from.
    #[arg(long)]
    gt: PathBuf,
    /// Full strategy as JSON, e.g. '{"kind":"region-constrained","region":"C","count":5}'.
    #[arg(long, conflicts_with_all = ["region", "count"])]
    spec: Option<String>,
    /// Region for a single-stage strategy: B, M, C, unions like B+M, or whole.
    #[arg(long, default_value = "whole")]
    region: String,
    /// Number of prompts for a single-stage strategy.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Per-run seed.
    #[arg(long)]
    seed: u64,
    /// Seed of the fixed stage of two-stage strategies.
    #[arg(long, default_value_t = 0)]
    fixed_seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Ground-truth mask (required by the oracle; staged for mirror testing).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Intensity image (required by external backends).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Prompt set written by `sample`.
    #[arg(long)]
    prompts: PathBuf,
    /// Predicted mask path (.nii or .raw).
    #[arg(long)]
    out: PathBuf,
    /// Backend as JSON (same schema as the config's `backend`); defaults to the oracle.
    #[arg(long)]
    backend: Option<String>,
    /// Oracle reach at zero depth, in mm.
    #[arg(long, default_value_t = OracleParams::default().r_base)]
    r_base: f64,
    /// Oracle reach gained per mm of depth.
    #[arg(long, default_value_t = OracleParams::default().alpha)]
    alpha: f64,
    /// Oracle radius carved around negative prompts, in mm.
    #[arg(long, default_value_t = OracleParams::default().r_neg)]
    r_neg: f64,
    /// Working directory for external backends (kept after the call).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Case identifier passed to external backends.
    #[arg(long, default_value = "case")]
    case_id: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predicted mask.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mask.
    #[arg(long)]
    gt: PathBuf,
    /// Surface tolerance in mm for NSD.
    #[arg(long, default_value_t = DEFAULT_TAU_MM)]
    tau: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to available hardware parallelism.
    #[arg(long, env = "PROMPTBENCH_WORKERS")]
    workers: Option<usize>,
    /// Recompute cells stored as failed.
    #[arg(long)]
    retry_failed: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Summary,
    Table1,
    Table2,
    Table3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    PerRun,
    PerSubject,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// results.jsonl written by `run`.
    #[arg(long)]
    results: PathBuf,
    /// Table layout.
    #[arg(long, value_enum, default_value = "summary")]
    layout: LayoutArg,
    /// Output format.
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    /// Aggregation unit of mean±std.
    #[arg(long, value_enum, default_value = "per-run")]
    aggregation: AggregationArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Output directory for case_NNN_{image,gt} files and subjects.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Master seed of the phantom set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge length of the cubic volumes in voxels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// File format of the written volumes.
    #[arg(long, value_enum, default_value = "nii")]
    format: FileFormat,
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// Protocol input directory (image, prompts.json, request.json, gt, stub_config.json).
    #[arg(long)]
    input: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn invalid(message: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn backend_failure(message: impl ToString) -> Failure {
    Failure {
        code: 3,
        message: message.to_string(),
    }
}

type CliResult = Result<(), Failure>;

fn write_output(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_mask(path: &Path) -> Result<Mask, Failure> {
    io::load_mask(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn cmd_decompose(args: DecomposeArgs) -> CliResult {
    let gt = load_mask(&args.gt)?;
    let regions = decompose(&gt);
    fs::create_dir_all(&args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    let format = args.format.format();
    for (stem, mask) in [
        ("boundary", &regions.boundary),
        ("margin", &regions.margin),
        ("center", &regions.center),
    ] {
        let path = args.out.join(format.file_name(stem));
        io::save_mask(mask, &path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    let [b, m, c] = regions.counts();
    let summary = serde_json::to_string_pretty(&json!({ "boundary": b, "margin": m, "center": c }))
        .expect("summary serializes");
    let path = args.out.join("summary.json");
    fs::write(&path, format!("{summary}\n")).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    println!("{summary}");
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> CliResult {
    let gt = load_mask(&args.gt)?;
    let spec: StrategySpec = match &args.spec {
        Some(text) => serde_json::from_str(text).map_err(|e| invalid(format!("--spec: {e}")))?,
        None => {
            let region: RegionSet = args.region.parse().map_err(|e| invalid(format!("--region: {e}")))?;
            if region.is_whole() {
                StrategySpec::RandomWhole { count: args.count }
            } else {
                StrategySpec::RegionConstrained {
                    region,
                    count: args.count,
                }
            }
        }
    };
    let prompts = build_strategy_prompts(&spec, &decompose(&gt), args.fixed_seed, args.seed)
        .map_err(invalid)?;
    for w in &prompts.warnings {
        eprintln!("warning: {}", serde_json::to_string(w).expect("warning serializes"));
    }
    write_output(args.out.as_deref(), &(prompts.to_json() + "\n"))
}

fn cmd_segment(args: SegmentArgs) -> CliResult {
    let prompts: PromptSet = read_json(&args.prompts)?;
    let backend: Backend = match &args.backend {
        Some(text) => serde_json::from_str(text).map_err(|e| invalid(format!("--backend: {e}")))?,
        None => Backend::SyntheticOracle(OracleParams {
            r_base: args.r_base,
            alpha: args.alpha,
            r_neg: args.r_neg,
        }),
    };
    let gt = args.gt.as_deref().map(load_mask).transpose()?;
    let pred = match backend {
        Backend::SyntheticOracle(params) => {
            let gt = gt.ok_or_else(|| invalid("the synthetic oracle needs --gt"))?;
            let oracle = SyntheticOracle::new(gt, params).map_err(invalid)?;
            oracle.segment(&prompts).map_err(invalid)?
        }
        Backend::ExternalProcess(command) => {
            let image_path = args.image.as_deref().ok_or_else(|| invalid("external backends need --image"))?;
            let image = io::load_volume(image_path)
                .map_err(|e| invalid(format!("{}: {e}", image_path.display())))?;
            let scratch;
            let workdir = match &args.workdir {
                Some(dir) => dir.as_path(),
                None => {
                    scratch = std::env::temp_dir().join(format!("promptbench-{}", std::process::id()));
                    scratch.as_path()
                }
            };
            let request = ProtocolRequest {
                tau_mm: DEFAULT_TAU_MM,
                case_id: args.case_id.clone(),
            };
            let result = external_segment(&image, &prompts, &command, workdir, &request, gt.as_ref());
            if args.workdir.is_none() {
                let _ = fs::remove_dir_all(workdir);
            }
            result.map_err(backend_failure)?
        }
    };
    io::save_mask(&pred, &args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let pred = load_mask(&args.pred)?;
    let gt = load_mask(&args.gt)?;
    let record = evaluate(&pred, &gt, args.tau).map_err(invalid)?;
    println!("{}", serde_json::to_string_pretty(&record).expect("metrics serialize"));
    Ok(())
}

fn cmd_run(args: RunArgs) -> CliResult {
    let config = ExperimentConfig::from_file(&args.config).map_err(invalid)?;
    let options = RunOptions {
        workers: args.workers.unwrap_or(0),
        retry_failed: args.retry_failed,
    };
    let outcome = run_experiment(&config, &options).map_err(invalid)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let table = &outcome.table;
    let summary = json!({
        "output_dir": config.output_dir,
        "records": table.records.len(),
        "computed": outcome.computed,
        "reused": outcome.reused,
        "failed_cells": table.failed_cells,
        "tables": outcome.tables,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if !table.records.is_empty() && table.failed_cells == table.records.len() {
        let first = table.records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(backend_failure(format!("every cell failed; first error: {first}")));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult {
    let records = read_records(&args.results).map_err(invalid)?;
    let mut table = ResultTable::from_records_only(records, Backend::SyntheticOracle(OracleParams::default()), DEFAULT_TAU_MM);
    if let AggregationArg::PerSubject = args.aggregation {
        table.aggregates = promptbench_core::experiment::aggregate(&table.records, AggregationMode::PerSubject);
    }
    let layout = match args.layout {
        LayoutArg::Summary => Layout::Summary,
        LayoutArg::Table1 => Layout::Table1,
        LayoutArg::Table2 => Layout::Table2,
        LayoutArg::Table3 => Layout::Table3,
    };
    let format = match args.format {
        FormatArg::Markdown => TableFormat::Markdown,
        FormatArg::Csv => TableFormat::Csv,
    };
    let rendered = render_table(&table, layout, format);
    for w in &rendered.warnings {
        eprintln!("warning: {w}");
    }
    write_output(args.out.as_deref(), &rendered.text)
}

fn cmd_phantoms(args: PhantomArgs) -> CliResult {
    if args.size < 8 {
        return Err(invalid("--size must be at least 8"));
    }
    fs::create_dir_all(&args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    let params = PhantomParams {
        dims: [args.size; 3],
        ..PhantomParams::default()
    };
    let format = args.format.format();
    let mut subjects = Vec::with_capacity(args.count);
    for (i, seed) in derive_seeds(args.seed, args.count).into_iter().enumerate() {
        let case_id = format!("case_{i:03}");
        let gt = phantom::blob(seed, &params);
        let image = phantom::image(&gt, seed);
        let gt_name = format.file_name(&format!("{case_id}_gt"));
        let image_name = format.file_name(&format!("{case_id}_image"));
        io::save_mask(&gt, args.out.join(&gt_name)).map_err(invalid)?;
        io::save_volume(&image, args.out.join(&image_name)).map_err(invalid)?;
        subjects.push(json!({ "case_id": case_id, "image": image_name, "gt": gt_name }));
    }
    let text = serde_json::to_string_pretty(&Value::Array(subjects)).expect("subjects serialize");
    let path = args.out.join("subjects.json");
    fs::write(&path, format!("{text}\n")).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(())
}

/// Finds `<stem>.nii` or `<stem>.raw` in `dir`.
fn protocol_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [Format::Nifti, Format::Raw]
        .into_iter()
        .map(|f| dir.join(f.file_name(stem)))
        .find(|p| p.exists())
}

fn cmd_protocol_oracle(args: ProtocolArgs) -> CliResult {
    let dir = &args.input;
    let image_path = protocol_file(dir, "image").ok_or_else(|| invalid("missing image file"))?;
    let format = Format::from_path(&image_path).expect("found by extension");
    let image = io::load_volume(&image_path).map_err(|e| invalid(format!("{}: {e}", image_path.display())))?;
    let prompts: PromptSet = read_json(&dir.join("prompts.json"))?;
    let config: Value = match dir.join("stub_config.json") {
        p if p.exists() => read_json(&p)?,
        _ => json!({ "mode": "oracle-mirror" }),
    };
    let mode = config.get("mode").and_then(Value::as_str).unwrap_or("oracle-mirror");
    let pred = match mode {
        "oracle-mirror" => {
            let gt_path = protocol_file(dir, "gt").ok_or_else(|| invalid("oracle-mirror mode needs a gt file"))?;
            let gt = load_mask(&gt_path)?;
            if gt.dims() != image.dims() {
                return Err(invalid(format!(
                    "gt dims {:?} differ from image dims {:?}",
                    gt.dims(),
                    image.dims()
                )));
            }
            let defaults = OracleParams::default();
            let param = |key: &str, default: f64| config.get(key).and_then(Value::as_f64).unwrap_or(default);
            let params = OracleParams {
                r_base: param("r_base", defaults.r_base),
                alpha: param("alpha", defaults.alpha),
                r_neg: param("r_neg", defaults.r_neg),
            };
            let oracle = SyntheticOracle::new(gt, params).map_err(invalid)?;
            oracle.segment(&prompts).map_err(invalid)?
        }
        "dilate" => {
            let radius = config.get("radius_mm").and_then(Value::as_f64).unwrap_or(0.0);
            dilate(&image.grid().clone(), &prompts, radius)?
        }
        other => return Err(invalid(format!("unknown stub mode {other:?}"))),
    };
    let out = dir.join(format.file_name("pred"));
    io::save_mask(&pred, &out).map_err(|e| invalid(format!("{}: {e}", out.display())))
}

/// Union of Euclidean balls of `radius_mm` around positive prompts.
fn dilate(grid: &promptbench_core::Grid, prompts: &PromptSet, radius_mm: f64) -> Result<Mask, Failure> {
    if !(radius_mm >= 0.0) {
        return Err(invalid("radius_mm must be >= 0"));
    }
    let centers: Vec<[usize; 3]> = prompts.positives().collect();
    for c in &centers {
        if !grid.contains([c[0] as i64, c[1] as i64, c[2] as i64]) {
            return Err(invalid(format!("prompt {c:?} outside the volume")));
        }
    }
    let s = grid.spacing;
    let limit = radius_mm + 1e-9;
    Ok(Mask::from_fn(*grid, |x, y, z| {
        centers.iter().any(|c| {
            let d = [x as f64 - c[0] as f64, y as f64 - c[1] as f64, z as f64 - c[2] as f64];
            ((d[0] * s[0]).powi(2) + (d[1] * s[1]).powi(2) + (d[2] * s[2]).powi(2)).sqrt() <= limit
        })
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose(a) => cmd_decompose(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Phantoms(a) => cmd_phantoms(a),
        Command::ProtocolOracle(a) => cmd_protocol_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
