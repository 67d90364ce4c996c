//! Dense point trajectories tracked through median-filtered flow.
//!
//! Points are sampled on a regular grid in textured regions, advanced one
//! frame at a time by the filtered flow read at their rounded position, and
//! emitted once they span `traj_len` frames. Static and erratic tracks are
//! pruned on emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{
    detect_corners, estimate_homography_ransac, flow_correspondences, min_eigen_map,
    point_correspondences, Homography, RansacParams,
};
use crate::error::{ensure, Error, Result};
use crate::flow::{median_filter_flow, MedianKernel};
use crate::io::write_atomic;
use crate::tensor::{round_half_up, FlowField, Image, Video};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub x: f32,
    pub y: f32,
    pub z: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_frame(&self) -> u32 {
        self.points[0].z
    }

    /// Per-step displacements `p_{i+1} − p_i`.
    pub fn displacements(&self) -> Vec<(f32, f32)> {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x, w[1].y - w[0].y))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Sampling grid step and occupancy cell size, in pixels.
    pub step: usize,
    /// Fraction of the frame's largest min-eigenvalue a sample must reach.
    pub quality: f32,
    /// Points per emitted trajectory.
    pub traj_len: usize,
    pub static_thresh: f32,
    pub jump_frac: f32,
    pub jump_abs: f32,
    pub use_camera_comp: bool,
    pub median_kernel: MedianKernel,
    pub ransac: RansacParams,
    pub corner_count: usize,
    pub corner_quality: f32,
    pub corner_min_dist: f32,
    pub match_grid_step: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            step: 5,
            quality: 0.001,
            traj_len: 15,
            static_thresh: 1.0,
            jump_frac: 0.7,
            jump_abs: 20.0,
            use_camera_comp: true,
            median_kernel: MedianKernel::default(),
            ransac: RansacParams::default(),
            corner_count: 200,
            corner_quality: 0.01,
            corner_min_dist: 5.0,
            match_grid_step: 4,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.step >= 1,
            Error::InvalidArgument("tracker step must be >= 1".into())
        );
        ensure!(
            self.traj_len >= 2,
            Error::InvalidArgument("trajectory length must be >= 2".into())
        );
        ensure!(
            self.static_thresh > 0.0 && self.jump_frac > 0.0 && self.jump_abs > 0.0,
            Error::InvalidArgument("pruning thresholds must be positive".into())
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Frame `t → t+1` camera motion, one per flow step; empty when camera
    /// compensation is off.
    pub homographies: Vec<Homography>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// One flag per `step × step` cell.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    step: usize,
    cols: usize,
    rows: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(height: usize, width: usize, step: usize) -> Self {
        let cols = width.div_ceil(step);
        let rows = height.div_ceil(step);
        Self {
            step,
            cols,
            rows,
            cells: vec![false; cols * rows],
        }
    }

    fn cell_of(&self, x: f32, y: f32) -> usize {
        let cx = ((x.max(0.0) as usize) / self.step).min(self.cols - 1);
        let cy = ((y.max(0.0) as usize) / self.step).min(self.rows - 1);
        cy * self.cols + cx
    }

    pub fn is_occupied(&self, x: f32, y: f32) -> bool {
        self.cells[self.cell_of(x, y)]
    }

    /// Marks the cell; returns `false` if it was already taken.
    pub fn occupy(&mut self, x: f32, y: f32) -> bool {
        let c = self.cell_of(x, y);
        !std::mem::replace(&mut self.cells[c], true)
    }

    pub fn fill(&mut self) {
        self.cells.fill(true);
    }
}

/// Grid points (cell centers, rounded down) whose smaller autocorrelation
/// eigenvalue reaches `quality × frame max`, skipping occupied cells.
pub fn sample_points(frame: &Image, occupied: &OccupancyGrid, cfg: &TrackerConfig) -> Result<Vec<(f32, f32)>> {
    let eig = min_eigen_map(frame)?;
    let max = eig.iter().copied().fold(0f32, f32::max);
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = cfg.quality * max;
    let (h, w) = (frame.height(), frame.width());
    let half = cfg.step / 2;
    let mut out = Vec::new();
    for y in (half..h).step_by(cfg.step) {
        for x in (half..w).step_by(cfg.step) {
            let (fx, fy) = (x as f32, y as f32);
            if occupied.is_occupied(fx, fy) {
                continue;
            }
            let e = eig[y * w + x];
            if e > 0.0 && e >= threshold {
                out.push((fx, fy));
            }
        }
    }
    Ok(out)
}

/// Advances each point by the filtered flow at its rounded position. Points
/// that leave the frame come back as `None`.
pub fn track_step(pts: &[(f32, f32)], flow_med: &FlowField) -> Vec<Option<(f32, f32)>> {
    let (h, w) = (flow_med.height(), flow_med.width());
    pts.iter()
        .map(|&(x, y)| {
            let xi = round_half_up(x as f64).clamp(0, w as i64 - 1) as usize;
            let yi = round_half_up(y as f64).clamp(0, h as i64 - 1) as usize;
            let (u, v) = flow_med.at(xi, yi);
            let (nx, ny) = (x + u, y + v);
            let inside = nx >= 0.0 && ny >= 0.0 && nx <= (w - 1) as f32 && ny <= (h - 1) as f32;
            inside.then_some((nx, ny))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prune {
    Keep,
    Static,
    Jump,
}

/// Pruning on raw displacements.
pub fn prune(traj: &Trajectory, cfg: &TrackerConfig) -> Prune {
    let d = traj.displacements();
    prune_steps(&d, &d, cfg)
}

/// Pruning where the static test sees motion relative to the camera:
/// each step's displacement minus the displacement `homographies[z]` predicts
/// for the background at that point.
pub fn prune_compensated(traj: &Trajectory, homographies: &[Homography], cfg: &TrackerConfig) -> Prune {
    let raw = traj.displacements();
    let residual: Vec<(f32, f32)> = traj
        .points
        .windows(2)
        .zip(&raw)
        .map(|(w, &(dx, dy))| {
            let p = w[0];
            match homographies.get(p.z as usize).and_then(|h| h.apply(p.x as f64, p.y as f64)) {
                Some((bx, by)) => (dx - (bx as f32 - p.x), dy - (by as f32 - p.y)),
                None => (dx, dy),
            }
        })
        .collect();
    prune_steps(&raw, &residual, cfg)
}

fn prune_steps(raw: &[(f32, f32)], motion: &[(f32, f32)], cfg: &TrackerConfig) -> Prune {
    let mags = |d: &[(f32, f32)]| -> Vec<f64> {
        d.iter()
            .map(|&(x, y)| ((x as f64).powi(2) + (y as f64).powi(2)).sqrt())
            .collect()
    };
    let m = mags(motion);
    if m.is_empty() {
        return Prune::Static;
    }
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    let std = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
    let thr = cfg.static_thresh as f64;
    if mean < thr && std < thr {
        return Prune::Static;
    }
    let r = mags(raw);
    let total: f64 = r.iter().sum();
    let limit = (cfg.jump_abs as f64).min(cfg.jump_frac as f64 * total);
    if r.iter().any(|&s| s > limit) {
        return Prune::Jump;
    }
    Prune::Keep
}

struct LiveTrack {
    start: u32,
    points: Vec<(f32, f32)>,
}

/// Background homography for one step, or identity if no consensus exists.
fn camera_motion(frame: &Image, flow_med: &FlowField, cfg: &TrackerConfig) -> Result<Homography> {
    let corners = detect_corners(frame, cfg.corner_count, cfg.corner_quality, cfg.corner_min_dist)?;
    let mut matches = point_correspondences(&corners, flow_med);
    matches.extend(flow_correspondences(flow_med, cfg.match_grid_step));
    Ok(match estimate_homography_ransac(&matches, &cfg.ransac) {
        Ok((h, _)) => h,
        Err(Error::InsufficientMatches(_) | Error::NoConsensus { .. } | Error::SingularHomography) => {
            Homography::identity()
        }
        Err(e) => return Err(e),
    })
}

/// Tracks points through the whole video on its original scale. `flows[t]`
/// is the raw flow from frame `t` to `t + 1`.
pub fn extract_trajectories(video: &Video, flows: &[FlowField], cfg: &TrackerConfig) -> Result<TrajectorySet> {
    cfg.validate()?;
    let length = video.len();
    ensure!(
        flows.len() + 1 == length,
        Error::DimensionMismatch(format!(
            "{length} frames need {} flow fields, got {}",
            length - 1,
            flows.len()
        ))
    );
    let (height, width) = (video.height(), video.width());
    ensure!(
        flows.iter().all(|f| f.height() == height && f.width() == width),
        Error::DimensionMismatch("flow fields do not match frame size".into())
    );
    let gray = video.to_gray()?;
    let p_len = cfg.traj_len;

    let mut live: Vec<LiveTrack> = Vec::new();
    let mut done = Vec::new();
    let mut homographies = Vec::new();

    for z in 0..length.saturating_sub(1) {
        let frame = &gray.frames()[z];
        if z + p_len <= length {
            let mut occ = OccupancyGrid::new(height, width, cfg.step);
            for t in &live {
                let &(x, y) = t.points.last().unwrap();
                occ.occupy(x, y);
            }
            for (x, y) in sample_points(frame, &occ, cfg)? {
                live.push(LiveTrack {
                    start: z as u32,
                    points: vec![(x, y)],
                });
            }
        }

        let flow_med = median_filter_flow(&flows[z], cfg.median_kernel);
        if cfg.use_camera_comp {
            homographies.push(camera_motion(frame, &flow_med, cfg)?);
        }

        let heads: Vec<(f32, f32)> = live.iter().map(|t| *t.points.last().unwrap()).collect();
        let moved = track_step(&heads, &flow_med);
        let mut occ = OccupancyGrid::new(height, width, cfg.step);
        let mut next = Vec::with_capacity(live.len());
        for (mut track, pos) in live.into_iter().zip(moved) {
            // oldest track keeps a contested cell
            let Some((x, y)) = pos else { continue };
            if !occ.occupy(x, y) {
                continue;
            }
            track.points.push((x, y));
            if track.points.len() == p_len {
                done.push(track);
            } else {
                next.push(track);
            }
        }
        live = next;
    }

    let trajectories = done
        .into_iter()
        .map(|t| Trajectory {
            points: t
                .points
                .into_iter()
                .enumerate()
                .map(|(i, (x, y))| TrajPoint {
                    x,
                    y,
                    z: t.start + i as u32,
                })
                .collect(),
        })
        .filter(|t| {
            let verdict = if cfg.use_camera_comp {
                prune_compensated(t, &homographies, cfg)
            } else {
                prune(t, cfg)
            };
            verdict == Prune::Keep
        })
        .collect();

    Ok(TrajectorySet {
        trajectories,
        height,
        width,
        length,
        homographies,
    })
}

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"TDJ1";

/// Trajectory file: magic `TDJ1`, `u32` id length, UTF-8 video id, then `u32`
/// `(H, W, L, P, K)` and `K` records of `P × (x, y, z)` `f32`, all
/// little-endian.
pub fn encode_trajectories(video_id: &str, set: &TrajectorySet, traj_len: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&(video_id.len() as u32).to_le_bytes());
    out.extend_from_slice(video_id.as_bytes());
    for d in [set.height, set.width, set.length, traj_len, set.len()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in &set.trajectories {
        for p in &t.points {
            for v in [p.x, p.y, p.z as f32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_trajectories(bytes: &[u8], origin: &str) -> Result<(String, TrajectorySet)> {
    ensure!(
        bytes.len() >= 8 && &bytes[..4] == TRAJECTORY_MAGIC,
        Error::BadMagic(origin.into())
    );
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Truncated(format!("{origin}: header")))
    };
    let id_len = u32_at(4)? as usize;
    let id_bytes = bytes
        .get(8..8 + id_len)
        .ok_or_else(|| Error::Truncated(format!("{origin}: video id")))?;
    let video_id = String::from_utf8(id_bytes.to_vec())
        .map_err(|_| Error::InvalidArgument(format!("{origin}: video id is not UTF-8")))?;
    let base = 8 + id_len;
    let dims: Vec<usize> = (0..5)
        .map(|i| u32_at(base + 4 * i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (height, width, length, p, k) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let need = k
        .checked_mul(p)
        .and_then(|v| v.checked_mul(12))
        .ok_or_else(|| Error::DimensionOverflow(format!("{origin}: {k} x {p}")))?;
    let payload = &bytes[base + 20..];
    ensure!(
        payload.len() >= need,
        Error::Truncated(format!("{origin}: {k} trajectories of {p} points"))
    );
    let vals: Vec<f32> = payload[..need]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let trajectories = vals
        .chunks_exact((p * 3).max(1))
        .take(k)
        .map(|rec| Trajectory {
            points: rec
                .chunks_exact(3)
                .map(|c| TrajPoint {
                    x: c[0],
                    y: c[1],
                    z: c[2] as u32,
                })
                .collect(),
        })
        .collect();
    Ok((
        video_id,
        TrajectorySet {
            trajectories,
            height,
            width,
            length,
            homographies: Vec::new(),
        },
    ))
}

/// JSON companion of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub video_id: String,
    pub config: TrackerConfig,
    /// Row-major 3×3 per flow step.
    pub homographies: Vec<[f32; 9]>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_trajectories(
    path: impl AsRef<Path>,
    video_id: &str,
    set: &TrajectorySet,
    cfg: &TrackerConfig,
) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_trajectories(video_id, set, cfg.traj_len))?;
    let sidecar = TrajectorySidecar {
        video_id: video_id.to_string(),
        config: cfg.clone(),
        homographies: set.homographies.iter().map(Homography::to_row_major_f32).collect(),
    };
    let sc_path = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::json(&sc_path, e))?;
    write_atomic(&sc_path, &json)
}

/// Reads a trajectory file; homographies are restored from the sidecar when
/// it exists.
pub fn read_trajectories(path: impl AsRef<Path>) -> Result<(String, TrajectorySet)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (id, mut set) = decode_trajectories(&bytes, &path.display().to_string())?;
    let sc_path = sidecar_path(path);
    if let Ok(sc) = fs::read(&sc_path) {
        let sc: TrajectorySidecar = serde_json::from_slice(&sc).map_err(|e| Error::json(&sc_path, e))?;
        set.homographies = sc
            .homographies
            .iter()
            .map(Homography::from_row_major_f32)
            .collect::<Result<_>>()?;
    }
    Ok((id, set))
}
