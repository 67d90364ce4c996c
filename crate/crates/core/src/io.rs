//! On-disk formats: `.tdt` tensors and video input.
//!
//! A `.tdt` file is the magic `TDT1`, four little-endian `u32` dims
//! `(H, W, L, N)`, a `u8` stream tag, an `f32` scale, then `H·W·L·N`
//! little-endian `f32` values in `(x, y, z, n)` order with `n` fastest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{FeatureMapStack, FlowField, Image, Stream, Video};

pub const TENSOR_MAGIC: &[u8; 4] = b"TDT1";
const TENSOR_HEADER_LEN: usize = 4 + 16 + 1 + 4;

pub fn encode_tensor(stack: &FeatureMapStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + stack.data().len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [stack.height, stack.width, stack.length, stack.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(stack.stream.tag());
    out.extend_from_slice(&stack.scale.to_le_bytes());
    for x in 0..stack.width {
        for y in 0..stack.height {
            for z in 0..stack.length {
                for v in stack.cell(x, y, z) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Decodes a `.tdt` buffer. The layer label is not stored in the file and is
/// left empty; callers recover it from the file name.
pub fn decode_tensor(bytes: &[u8], origin: &str) -> Result<FeatureMapStack> {
    ensure!(
        bytes.len() >= 4 && &bytes[..4] == TENSOR_MAGIC,
        Error::BadMagic(origin.to_string())
    );
    ensure!(
        bytes.len() >= TENSOR_HEADER_LEN,
        Error::Truncated(format!("{origin}: header"))
    );
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as u64;
    let (h, w, l, n) = (dim(0), dim(1), dim(2), dim(3));
    let stream = Stream::from_tag(bytes[20])
        .ok_or_else(|| Error::InvalidArgument(format!("{origin}: unknown stream tag {}", bytes[20])))?;
    let scale = f32::from_le_bytes(bytes[21..25].try_into().unwrap());
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(l))
        .and_then(|v| v.checked_mul(n))
        .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
        .ok_or_else(|| Error::DimensionOverflow(format!("{origin}: {h}x{w}x{l}x{n}")))?;
    let payload = &bytes[TENSOR_HEADER_LEN..];
    ensure!(
        (payload.len() as u64) >= count * 4,
        Error::Truncated(format!(
            "{origin}: header claims {count} values, file holds {}",
            payload.len() / 4
        ))
    );
    let (h, w, l, n) = (h as usize, w as usize, l as usize, n as usize);
    let mut data = vec![0f32; count as usize];
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for x in 0..w {
        for y in 0..h {
            for z in 0..l {
                let base = ((z * h + y) * w + x) * n;
                for slot in &mut data[base..base + n] {
                    *slot = values.next().unwrap();
                }
            }
        }
    }
    FeatureMapStack::new(h, w, l, n, String::new(), stream, scale, data)
}

pub fn write_tensor(stack: &FeatureMapStack, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(stack))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMapStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, &path.display().to_string())
}

/// Flow fields as a tensor with `N = 2` (`u` then `v`), one frame per flow.
pub fn flows_to_stack(flows: &[FlowField]) -> Result<FeatureMapStack> {
    ensure!(
        !flows.is_empty(),
        Error::InvalidArgument("no flow fields".into())
    );
    let frames = flows.iter().map(FlowField::to_image).collect();
    FeatureMapStack::from_frames(frames, "flow", Stream::Temporal, 1.0)
}

pub fn stack_to_flows(stack: &FeatureMapStack) -> Result<Vec<FlowField>> {
    ensure!(
        stack.channels == 2,
        Error::DimensionMismatch(format!("flow tensor needs N=2, got {}", stack.channels))
    );
    let frame_len = stack.height * stack.width * 2;
    stack
        .data()
        .chunks_exact(frame_len)
        .map(|chunk| {
            let img = Image::new(stack.height, stack.width, 2, chunk.to_vec())?;
            FlowField::from_image(&img)
        })
        .collect()
}

/// Writes through a temporary file in the same directory and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// JSON sidecar describing a raw planar video file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawVideoHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
}

/// Sidecar path for a raw video: same stem, `.json` extension.
pub fn raw_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes a video as raw planar little-endian `f32` (each frame stored as
/// `channels` consecutive planes) plus its JSON sidecar.
pub fn write_raw_video(video: &Video, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = RawVideoHeader {
        height: video.height(),
        width: video.width(),
        channels: video.channels(),
        frames: video.len(),
    };
    let mut bytes = Vec::with_capacity(header.height * header.width * header.channels * header.frames * 4);
    for frame in video.frames() {
        for c in 0..header.channels {
            for y in 0..header.height {
                for x in 0..header.width {
                    bytes.extend_from_slice(&frame.at(x, y, c).to_le_bytes());
                }
            }
        }
    }
    write_atomic(path, &bytes)?;
    let sidecar = raw_sidecar_path(path);
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(&sidecar, e))?;
    write_atomic(&sidecar, &json)
}

pub fn read_raw_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    let sidecar = raw_sidecar_path(path);
    let header_bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: RawVideoHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::json(&sidecar, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let RawVideoHeader {
        height: h,
        width: w,
        channels: c,
        frames: l,
    } = header;
    let frame_len = h * w * c;
    ensure!(
        bytes.len() >= frame_len * l * 4,
        Error::Truncated(format!(
            "{}: sidecar claims {l} frames of {h}x{w}x{c}",
            path.display()
        ))
    );
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .take(frame_len * l)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let frames = values
        .chunks_exact(frame_len)
        .map(|planes| {
            let mut data = vec![0f32; frame_len];
            for ch in 0..c {
                for i in 0..h * w {
                    data[i * c + ch] = planes[ch * h * w + i];
                }
            }
            Image::new(h, w, c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Video::new(frames)
}

/// Reads a directory of numbered PNG/PGM frames, ordered by file name.
/// Pixel values are kept on the 0–255 scale.
pub fn read_frame_dir(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    paths.sort();
    ensure!(
        !paths.is_empty(),
        Error::InvalidArgument(format!("{}: no PNG/PGM frames", dir.display()))
    );
    let frames = paths
        .iter()
        .map(|p| {
            let img = image::open(p).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?;
            if img.color().channel_count() == 1 {
                let g = img.to_luma8();
                let data = g.as_raw().iter().map(|&v| v as f32).collect();
                Image::new(g.height() as usize, g.width() as usize, 1, data)
            } else {
                let rgb = img.to_rgb8();
                let data = rgb.as_raw().iter().map(|&v| v as f32).collect();
                Image::new(rgb.height() as usize, rgb.width() as usize, 3, data)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Video::new(frames)
}

/// Loads either a frame directory or a raw `f32` file with sidecar.
pub fn read_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    if path.is_dir() {
        read_frame_dir(path)
    } else {
        read_raw_video(path)
    }
}
