//! Seeded synthetic motion dataset: a textured disc over a static textured
//! background, moving according to its class.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tdd_core::io::{write_atomic, write_raw_video};
use tdd_core::tensor::{Image, Video};

use crate::error::{CliError, Result};

pub const CLASSES: [&str; 4] = ["translate", "rotate", "zoom", "oscillate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Standard deviation of per-pixel sensor noise, 0–255 scale.
    pub noise: f32,
    pub splits: usize,
    pub seed: u64,
    /// Write splits whose test set equals the training set.
    pub smoke: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec!["translate".into(), "rotate".into(), "zoom".into()],
            per_class: 20,
            height: 64,
            width: 64,
            length: 16,
            noise: 2.0,
            splits: 3,
            seed: 1,
            smoke: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "motion", rename_all = "lowercase")]
pub enum MotionTruth {
    /// Pixels per frame.
    Translate { dx: f32, dy: f32 },
    /// Radians per frame, positive is clockwise in image coordinates.
    Rotate { omega: f32 },
    /// Per-frame magnification of the disc content; below 1 the content
    /// recedes toward the disc centre, so tracked points stay on the disc.
    Zoom { factor: f32 },
    Oscillate { amplitude: f32, period: f32, angle: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub label: usize,
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub truth: Option<MotionTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub id: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Train and test deliberately coincide.
    #[serde(default)]
    pub smoke: bool,
}

impl SplitSpec {
    /// Ids present on both sides, unless the split is flagged as smoke.
    pub fn leakage(&self) -> Vec<&str> {
        if self.smoke {
            return Vec::new();
        }
        self.test
            .iter()
            .filter(|t| self.train.contains(t))
            .map(String::as_str)
            .collect()
    }
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("dataset.json")
}

pub fn splits_path(dir: &Path) -> PathBuf {
    dir.join("splits.json")
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<SplitSpec>)> {
    let read = |p: PathBuf| -> Result<Vec<u8>> {
        fs::read(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    };
    let ds: DatasetIndex = serde_json::from_slice(&read(dataset_path(dir))?)
        .map_err(|e| CliError::data(format!("{}: {e}", dataset_path(dir).display())))?;
    let splits: Vec<SplitSpec> = serde_json::from_slice(&read(splits_path(dir))?)
        .map_err(|e| CliError::data(format!("{}: {e}", splits_path(dir).display())))?;
    Ok((ds, splits))
}

/// Smooth periodic value noise in `[-1, 1]`.
struct Texture {
    grid: Vec<f32>,
    n: usize,
    spacing: f32,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, n: usize, spacing: f32) -> Self {
        Self {
            grid: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n,
            spacing,
        }
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x / self.spacing, y / self.spacing);
        let (x0, y0) = (gx.floor(), gy.floor());
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - x0), smooth(gy - y0));
        let n = self.n as i64;
        let at = |i: i64, j: i64| self.grid[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize];
        let (i, j) = (x0 as i64, y0 as i64);
        let top = at(i, j) * (1.0 - tx) + at(i + 1, j) * tx;
        let bottom = at(i, j + 1) * (1.0 - tx) + at(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Layer {
    coarse: Texture,
    fine: Texture,
    color: [f32; 3],
    base: [f32; 3],
}

impl Layer {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            coarse: Texture::new(rng, 32, 7.0),
            fine: Texture::new(rng, 32, 3.5),
            color: [0; 3].map(|_| rng.random_range(0.4..1.0)),
            base: [0; 3].map(|_| rng.random_range(90.0..166.0)),
        }
    }

    fn rgb(&self, x: f32, y: f32) -> [f32; 3] {
        let t = self.coarse.sample(x, y) + 0.5 * self.fine.sample(x, y);
        [0, 1, 2].map(|c| self.base[c] + 60.0 * t * self.color[c])
    }
}

fn draw_truth(class: &str, rng: &mut ChaCha8Rng) -> Result<MotionTruth> {
    Ok(match class {
        "translate" => {
            let speed = rng.random_range(1.5..2.5f32);
            let angle = rng.random_range(-PI / 6.0..PI / 6.0);
            MotionTruth::Translate {
                dx: speed * angle.cos(),
                dy: speed * angle.sin(),
            }
        }
        "rotate" => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            MotionTruth::Rotate {
                omega: sign * rng.random_range(0.08..0.12f32),
            }
        }
        "zoom" => MotionTruth::Zoom {
            factor: rng.random_range(0.88..0.92f32),
        },
        "oscillate" => MotionTruth::Oscillate {
            amplitude: rng.random_range(4.0..6.0f32),
            period: rng.random_range(6.0..10.0f32),
            angle: rng.random_range(0.0..PI),
        },
        other => {
            return Err(CliError::config(format!(
                "unknown class name \"{other}\" (expected one of {})",
                CLASSES.join(", ")
            )))
        }
    })
}

/// Renders one clip. The disc keeps a fixed radius; rotation and zoom act on
/// its content.
pub fn render(truth: &MotionTruth, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Video> {
    let (h, w, l) = (cfg.height, cfg.width, cfg.length);
    let bg = Layer::new(rng);
    let fg = Layer::new(rng);
    let radius = 0.31 * h.min(w) as f32;
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mid = (l as f32 - 1.0) / 2.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut frames = Vec::with_capacity(l);
    for t in 0..l {
        let tf = t as f32;
        // disc centre and the map from image offsets to texture coordinates
        let (ox, oy) = match *truth {
            MotionTruth::Translate { dx, dy } => (cx + (tf - mid) * dx, cy + (tf - mid) * dy),
            MotionTruth::Oscillate {
                amplitude,
                period,
                angle,
            } => {
                let a = amplitude * (2.0 * PI * tf / period + phase).sin();
                (cx + a * angle.cos(), cy + a * angle.sin())
            }
            _ => (cx, cy),
        };
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (rx, ry) = (x as f32 - ox, y as f32 - oy);
                let px = if rx * rx + ry * ry < radius * radius {
                    let (u, v) = match *truth {
                        MotionTruth::Rotate { omega } => {
                            let (s, c) = (-omega * tf).sin_cos();
                            (c * rx - s * ry, s * rx + c * ry)
                        }
                        MotionTruth::Zoom { factor } => {
                            let k = factor.powf(-tf);
                            (k * rx, k * ry)
                        }
                        _ => (rx, ry),
                    };
                    fg.rgb(u + 100.0, v + 100.0)
                } else {
                    bg.rgb(x as f32, y as f32)
                };
                for c in px {
                    let n: f32 = StandardNormal.sample(rng);
                    data.push((c + cfg.noise * n).clamp(0.0, 255.0));
                }
            }
        }
        frames.push(Image::new(h, w, 3, data)?);
    }
    Ok(Video::new(frames)?)
}

/// Writes the dataset into `dir`: raw videos under `videos/`, `dataset.json`
/// and `splits.json`. Split `i` tests on every video whose index within its
/// class is `i` modulo the split count.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<(DatasetIndex, Vec<SplitSpec>)> {
    if cfg.classes.len() < 2 {
        return Err(CliError::config("synth needs at least two classes"));
    }
    if cfg.per_class == 0 || cfg.splits == 0 || cfg.per_class < cfg.splits {
        return Err(CliError::config("synth needs per_class >= splits >= 1"));
    }
    if cfg.height < 16 || cfg.width < 16 || cfg.length < 2 {
        return Err(CliError::config("synth videos must be at least 16x16 with 2 frames"));
    }
    let mut jobs = Vec::new();
    for (label, class) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((label as u64) << 32 | i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let truth = draw_truth(class, &mut rng)?;
            jobs.push((format!("{class}_{i:03}"), label, truth, rng));
        }
    }
    let entries = jobs
        .into_iter()
        .map(|(id, label, truth, mut rng)| {
            let video = render(&truth, cfg, &mut rng)?;
            let rel = PathBuf::from("videos").join(format!("{id}.raw"));
            write_raw_video(&video, dir.join(&rel))?;
            Ok(VideoEntry {
                id,
                label,
                path: rel,
                truth: Some(truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let index = DatasetIndex {
        classes: cfg.classes.clone(),
        videos: entries,
    };
    let splits: Vec<SplitSpec> = (0..cfg.splits)
        .map(|s| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for v in &index.videos {
                let within: usize = v.id.rsplit('_').next().and_then(|n| n.parse().ok()).unwrap_or(0);
                if cfg.smoke {
                    train.push(v.id.clone());
                    test.push(v.id.clone());
                } else if within % cfg.splits == s {
                    test.push(v.id.clone());
                } else {
                    train.push(v.id.clone());
                }
            }
            SplitSpec {
                id: s,
                train,
                test,
                smoke: cfg.smoke,
            }
        })
        .collect();
    write_atomic(&dataset_path(dir), &pretty_json(&index))?;
    write_atomic(&splits_path(dir), &pretty_json(&splits))?;
    Ok((index, splits))
}

pub fn pretty_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("plain data serializes");
    out.push(b'\n');
    out
}
