//! Segmentation backends.
//!
//! [`SyntheticOracle`] is a deterministic stand-in for an interactive model:
//! each positive prompt claims the ground-truth voxels within a geodesic
//! radius that grows with the prompt's depth inside the object, so prompts
//! far from the boundary reach more of the object. [`external_segment`]
//! drives a real model through a file-based subprocess protocol.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, Format, IoError};
use crate::metrics::squared_edt;
use crate::sampling::{PromptSet, Voxel};
use crate::volume::{Grid, Mask, Volume3};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("positive prompt {0:?} lies outside the ground truth")]
    PromptOutsideGroundTruth(Voxel),
    #[error("prompt {0:?} lies outside the volume")]
    PromptOutOfBounds(Voxel),
    #[error("oracle parameters must be finite and nonnegative")]
    BadParams,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("external command is empty")]
    EmptyCommand,
    #[error("failed to launch {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("external command exited with {status}; stderr: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("external command timed out after {0:?}; stderr: {1}")]
    Timeout(Duration, String),
    #[error("external command produced no prediction ({0})")]
    MissingOutput(PathBuf),
    #[error("prediction unreadable: {0}")]
    BadOutput(#[source] IoError),
    #[error("prediction dims {got:?} differ from image dims {expected:?}")]
    DimsMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("failed to stage protocol files: {0}")]
    Stage(String),
}

/// Parameters of the synthetic oracle: a positive prompt at depth `d` (mm
/// to the nearest background voxel) claims every object voxel within
/// geodesic distance `r_base + alpha * d`; negative prompts carve a
/// geodesic ball of radius `r_neg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub r_base: f64,
    pub alpha: f64,
    pub r_neg: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            r_base: 2.0,
            alpha: 1.0,
            r_neg: 0.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.r_base) && ok(self.alpha) && ok(self.r_neg) {
            Ok(())
        } else {
            Err(SegmentError::BadParams)
        }
    }
}

/// Absolute slack on geodesic radius comparisons (mm).
const RADIUS_SLACK_MM: f64 = 1e-9;

/// Distance (mm) from every voxel to the nearest background voxel, with
/// the region outside the grid treated as background. Zero on background.
pub fn depth_map(gt: &Mask) -> Vec<f64> {
    let [nx, ny, nz] = gt.dims();
    let padded_grid = Grid::new([nx + 2, ny + 2, nz + 2], gt.spacing(), gt.grid().origin)
        .expect("padded grid is valid");
    let background = Mask::from_fn(padded_grid, |x, y, z| {
        x == 0
            || y == 0
            || z == 0
            || x > nx
            || y > ny
            || z > nz
            || !gt.get(x - 1, y - 1, z - 1)
    });
    let sq = squared_edt(&background);
    let mut out = Vec::with_capacity(gt.grid().len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(sq[padded_grid.index(x + 1, y + 1, z + 1)].sqrt());
            }
        }
    }
    out
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    index: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marks every `domain` voxel whose 6-connected, spacing-weighted path
/// length from `source` (inside `domain`) is at most `radius`.
pub fn geodesic_ball(domain: &Mask, source: Voxel, radius: f64, out: &mut [bool]) {
    geodesic_union(domain, &[(source, radius)], out);
}

/// Union of geodesic balls, in one multi-source pass: a voxel is reached
/// when `min over sources (path length - radius) <= 0`. Sources outside
/// `domain` contribute nothing.
pub fn geodesic_union(domain: &Mask, sources: &[(Voxel, f64)], out: &mut [bool]) {
    let grid = domain.grid();
    let [nx, ny, nz] = grid.dims;
    let [wx, wy, wz] = grid.spacing;
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap = BinaryHeap::new();
    for &([x, y, z], radius) in sources {
        if !domain.get(x, y, z) {
            continue;
        }
        let index = grid.index(x, y, z);
        if -radius < dist[index] {
            dist[index] = -radius;
            heap.push(Frontier {
                dist: -radius,
                index,
            });
        }
    }
    while let Some(Frontier { dist: d, index }) = heap.pop() {
        if d > dist[index] {
            continue;
        }
        out[index] = true;
        let [x, y, z] = grid.coords(index);
        let mut relax = |ok: bool, next: usize, w: f64| {
            if !ok || !domain.data()[next] {
                return;
            }
            let nd = d + w;
            if nd <= RADIUS_SLACK_MM && nd < dist[next] {
                dist[next] = nd;
                heap.push(Frontier {
                    dist: nd,
                    index: next,
                });
            }
        };
        relax(x > 0, index.wrapping_sub(1), wx);
        relax(x + 1 < nx, index + 1, wx);
        relax(y > 0, index.wrapping_sub(nx), wy);
        relax(y + 1 < ny, index + nx, wy);
        relax(z > 0, index.wrapping_sub(nx * ny), wz);
        relax(z + 1 < nz, index + nx * ny, wz);
    }
}

/// Synthetic segmenter bound to one ground-truth mask.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    gt: Mask,
    depth: Vec<f64>,
    params: OracleParams,
}

impl SyntheticOracle {
    pub fn new(gt: Mask, params: OracleParams) -> Result<Self, SegmentError> {
        params.validate()?;
        if gt.is_empty() {
            return Err(SegmentError::EmptyGroundTruth);
        }
        let depth = depth_map(&gt);
        Ok(Self { gt, depth, params })
    }

    pub fn params(&self) -> OracleParams {
        self.params
    }

    /// Distance (mm) from `voxel` to the nearest background voxel.
    pub fn depth(&self, voxel: Voxel) -> f64 {
        let [x, y, z] = voxel;
        self.depth[self.gt.grid().index(x, y, z)]
    }

    pub fn reach(&self, voxel: Voxel) -> f64 {
        self.params.r_base + self.params.alpha * self.depth(voxel)
    }

    pub fn segment(&self, prompts: &PromptSet) -> Result<Mask, SegmentError> {
        let grid = *self.gt.grid();
        let in_bounds = |[x, y, z]: Voxel| x < grid.dims[0] && y < grid.dims[1] && z < grid.dims[2];
        for v in prompts.voxels() {
            if !in_bounds(v) {
                return Err(SegmentError::PromptOutOfBounds(v));
            }
        }
        let mut positives = Vec::new();
        for p in prompts.positives() {
            let [x, y, z] = p;
            if !self.gt.get(x, y, z) {
                return Err(SegmentError::PromptOutsideGroundTruth(p));
            }
            positives.push((p, self.reach(p)));
        }
        let negatives: Vec<(Voxel, f64)> = prompts
            .negatives()
            .map(|q| (q, self.params.r_neg))
            .collect();
        let mut claimed = vec![false; grid.len()];
        geodesic_union(&self.gt, &positives, &mut claimed);
        let mut carved = vec![false; grid.len()];
        geodesic_union(&self.gt, &negatives, &mut carved);
        let data = claimed
            .iter()
            .zip(&carved)
            .map(|(&c, &n)| c && !n)
            .collect();
        Ok(Mask::new(grid, data).expect("same grid"))
    }
}

pub fn synthetic_segment(
    gt: &Mask,
    prompts: &PromptSet,
    params: OracleParams,
) -> Result<Mask, SegmentError> {
    SyntheticOracle::new(gt.clone(), params)?.segment(prompts)
}

// ---------------------------------------------------------------------------
// External process protocol

/// How to invoke an external segmenter. The harness appends
/// `--input <dir>` to `command`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub command: Vec<String>,
    #[serde(default)]
    pub timeout_s: Option<f64>,
    #[serde(default = "default_format")]
    pub format: String,
    /// Also stage the ground truth as `gt.<ext>` (for mirror testing only).
    #[serde(default)]
    pub include_gt: bool,
    /// Written verbatim to `stub_config.json` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub_config: Option<serde_json::Value>,
}

fn default_format() -> String {
    "nii".to_string()
}

impl ExternalCommand {
    pub fn new<S: Into<String>>(command: impl IntoIterator<Item = S>) -> Self {
        Self {
            command: command.into_iter().map(Into::into).collect(),
            timeout_s: None,
            format: default_format(),
            include_gt: false,
            stub_config: None,
        }
    }

    fn file_format(&self) -> Result<Format, ProtocolError> {
        match self.format.as_str() {
            "nii" => Ok(Format::Nifti),
            "raw" => Ok(Format::Raw),
            other => Err(ProtocolError::Stage(format!(
                "unknown protocol format {other:?} (expected \"nii\" or \"raw\")"
            ))),
        }
    }
}

/// Contents of `request.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRequest {
    pub tau_mm: f64,
    pub case_id: String,
}

fn stage_err(e: impl std::fmt::Display) -> ProtocolError {
    ProtocolError::Stage(e.to_string())
}

/// Writes the protocol input files into `workdir`.
pub fn stage_inputs(
    image: &Volume3,
    prompts: &PromptSet,
    request: &ProtocolRequest,
    command: &ExternalCommand,
    gt: Option<&Mask>,
    workdir: &Path,
) -> Result<(), ProtocolError> {
    let format = command.file_format()?;
    fs::create_dir_all(workdir).map_err(stage_err)?;
    io::save_volume(image, workdir.join(format.file_name("image"))).map_err(stage_err)?;
    fs::write(workdir.join("prompts.json"), prompts.to_json()).map_err(stage_err)?;
    let request = serde_json::to_string_pretty(request).expect("request serializes");
    fs::write(workdir.join("request.json"), request).map_err(stage_err)?;
    if let (true, Some(gt)) = (command.include_gt, gt) {
        io::save_mask(gt, workdir.join(format.file_name("gt"))).map_err(stage_err)?;
    }
    if let Some(cfg) = &command.stub_config {
        let text = serde_json::to_string_pretty(cfg).expect("json value serializes");
        fs::write(workdir.join("stub_config.json"), text).map_err(stage_err)?;
    }
    Ok(())
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Runs an external segmenter over the file protocol and returns its mask.
pub fn external_segment(
    image: &Volume3,
    prompts: &PromptSet,
    command: &ExternalCommand,
    workdir: &Path,
    request: &ProtocolRequest,
    gt: Option<&Mask>,
) -> Result<Mask, ProtocolError> {
    let (program, args) = command
        .command
        .split_first()
        .ok_or(ProtocolError::EmptyCommand)?;
    let format = command.file_format()?;
    stage_inputs(image, prompts, request, command, gt, workdir)?;

    let pred_path = workdir.join(format.file_name("pred"));
    let _ = fs::remove_file(&pred_path);

    let mut child = Command::new(program)
        .args(args)
        .arg("--input")
        .arg(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| ProtocolError::Spawn {
            program: program.clone(),
            source,
        })?;
    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());

    let timeout = command.timeout_s.map(Duration::from_secs_f64);
    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(e) => return Err(stage_err(e)),
        }
        if let Some(limit) = timeout {
            if started.elapsed() > limit {
                let _ = child.kill();
                let _ = child.wait();
                let _ = stdout.join();
                let err = stderr.join().unwrap_or_default();
                return Err(ProtocolError::Timeout(limit, err));
            }
        }
        thread::sleep(Duration::from_millis(5));
    };
    let _ = stdout.join();
    let err_text = stderr.join().unwrap_or_default();
    if !status.success() {
        return Err(ProtocolError::Failed {
            status: status.to_string(),
            stderr: err_text,
        });
    }
    if !pred_path.exists() {
        return Err(ProtocolError::MissingOutput(pred_path));
    }
    let pred = io::load_mask(&pred_path).map_err(ProtocolError::BadOutput)?;
    if pred.dims() != image.dims() {
        return Err(ProtocolError::DimsMismatch {
            expected: image.dims(),
            got: pred.dims(),
        });
    }
    Ok(pred)
}
