//! Feature-map normalization and trajectory-constrained sum pooling.
//!
//! A trajectory-pooled descriptor for layer `m` sums the normalized map cell
//! under each trajectory point:
//!
//! ```text
//! D[n] = Σ_p  C̃(round(r_m·s·x_p), round(r_m·s·y_p), z_p, n)
//! ```
//!
//! where `r_m` is the layer's map ratio and `s` the pyramid scale the map was
//! computed at. Trajectories are always tracked at scale 1, so the same
//! trajectory indexes every scale's map.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::{map_coordinates, MapRatio};
use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;
use crate::tensor::{FeatureMapStack, ScaleSet, Stream};
use crate::trajectory::{Trajectory, TrajectorySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Each channel divided by its maximum over the whole video.
    Spatiotemporal,
    /// Each map cell divided by its maximum over channels.
    Channel,
}

impl NormKind {
    pub const ALL: [NormKind; 2] = [NormKind::Spatiotemporal, NormKind::Channel];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Spatiotemporal => "st",
            NormKind::Channel => "ch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStack {
    pub stack: FeatureMapStack,
    pub kind: NormKind,
}

fn check_nonnegative(c: &FeatureMapStack) -> Result<()> {
    match c.data().iter().position(|v| !(*v >= 0.0)) {
        Some(index) => Err(Error::NegativeValue {
            value: c.data()[index],
            index,
        }),
        None => Ok(()),
    }
}

pub fn normalize_spatiotemporal(c: &FeatureMapStack) -> Result<NormalizedStack> {
    check_nonnegative(c)?;
    let n = c.channels;
    let mut max = vec![0f32; n];
    for cell in c.data().chunks_exact(n) {
        for (m, &v) in max.iter_mut().zip(cell) {
            *m = m.max(v);
        }
    }
    let mut out = c.clone();
    for cell in out.data_mut().chunks_exact_mut(n) {
        for (v, &m) in cell.iter_mut().zip(&max) {
            if m > 0.0 {
                *v /= m;
            }
        }
    }
    Ok(NormalizedStack {
        stack: out,
        kind: NormKind::Spatiotemporal,
    })
}

pub fn normalize_channel(c: &FeatureMapStack) -> Result<NormalizedStack> {
    check_nonnegative(c)?;
    let mut out = c.clone();
    for cell in out.data_mut().chunks_exact_mut(c.channels) {
        let m = cell.iter().copied().fold(0f32, f32::max);
        if m > 0.0 {
            for v in cell.iter_mut() {
                *v /= m;
            }
        }
    }
    Ok(NormalizedStack {
        stack: out,
        kind: NormKind::Channel,
    })
}

pub fn normalize(c: &FeatureMapStack, kind: NormKind) -> Result<NormalizedStack> {
    match kind {
        NormKind::Spatiotemporal => normalize_spatiotemporal(c),
        NormKind::Channel => normalize_channel(c),
    }
}

/// Accumulation used along a trajectory. Both accumulate in `f64` over points
/// in ascending order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summation {
    #[default]
    Plain,
    /// Kahan-compensated.
    Compensated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TddDescriptor {
    pub values: Vec<f32>,
    pub trajectory: usize,
    pub layer: String,
    pub stream: Stream,
    pub norm: NormKind,
    pub scale: f32,
}

pub fn pool_trajectory(t: &Trajectory, c: &NormalizedStack, r_m: f64, s: f64) -> Result<TddDescriptor> {
    pool_trajectory_with(t, c, r_m, s, Summation::Plain)
}

pub fn pool_trajectory_with(
    t: &Trajectory,
    c: &NormalizedStack,
    r_m: f64,
    s: f64,
    summation: Summation,
) -> Result<TddDescriptor> {
    let st = &c.stack;
    let n = st.channels;
    let mut sum = vec![0f64; n];
    let mut comp = vec![0f64; n];
    for &p in &t.points {
        ensure!(
            (p.z as usize) < st.length,
            Error::FrameOutOfRange {
                frame: p.z,
                length: st.length
            }
        );
        let (i, j, z) = map_coordinates(p, r_m, s, st.width, st.height);
        let cell = st.cell(i, j, z as usize);
        match summation {
            Summation::Plain => {
                for (acc, &v) in sum.iter_mut().zip(cell) {
                    *acc += v as f64;
                }
            }
            Summation::Compensated => {
                for ((acc, err), &v) in sum.iter_mut().zip(comp.iter_mut()).zip(cell) {
                    let y = v as f64 - *err;
                    let t = *acc + y;
                    *err = (t - *acc) - y;
                    *acc = t;
                }
            }
        }
    }
    Ok(TddDescriptor {
        values: sum.into_iter().map(|v| v as f32).collect(),
        trajectory: 0,
        layer: st.layer.clone(),
        stream: st.stream,
        norm: c.kind,
        scale: st.scale,
    })
}

/// A tapped layer and its map ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapLayer {
    pub stream: Stream,
    pub name: String,
    pub ratio: MapRatio,
}

fn find_stack<'a>(
    stacks: &'a [NormalizedStack],
    layer: &TapLayer,
    kind: NormKind,
    scale: f64,
) -> Result<&'a NormalizedStack> {
    stacks
        .iter()
        .find(|s| {
            s.kind == kind
                && s.stack.stream == layer.stream
                && s.stack.layer == layer.name
                && s.stack.scale == scale as f32
        })
        .ok_or_else(|| Error::MissingGroup {
            stream: layer.stream.to_string(),
            layer: layer.name.clone(),
            scale,
        })
}

/// One descriptor per (trajectory, layer, normalization, scale), ordered by
/// trajectory, then `layers` order, then normalization, then `scales` order.
pub fn extract_tdds(
    ts: &TrajectorySet,
    stacks: &[NormalizedStack],
    layers: &[TapLayer],
    scales: &ScaleSet,
) -> Result<Vec<TddDescriptor>> {
    extract_tdds_with(ts, stacks, layers, scales, Summation::Plain)
}

pub fn extract_tdds_with(
    ts: &TrajectorySet,
    stacks: &[NormalizedStack],
    layers: &[TapLayer],
    scales: &ScaleSet,
    summation: Summation,
) -> Result<Vec<TddDescriptor>> {
    let mut plan = Vec::new();
    for layer in layers {
        for kind in NormKind::ALL {
            for &s in scales.as_slice() {
                plan.push((find_stack(stacks, layer, kind, s)?, layer.ratio.value()));
            }
        }
    }
    let per_traj: Vec<Vec<TddDescriptor>> = ts
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            plan.iter()
                .map(|&(stack, r)| {
                    let mut d = pool_trajectory_with(t, stack, r, stack.stack.scale as f64, summation)?;
                    d.trajectory = k;
                    Ok(d)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_traj.into_iter().flatten().collect())
}

/// Descriptors of one (stream, layer, normalization).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub stream: Stream,
    pub layer: String,
    pub norm: NormKind,
}

impl GroupKey {
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.stream, self.layer, self.norm.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHeader {
    #[serde(flatten)]
    pub key: GroupKey,
    pub dim: usize,
}

/// All descriptors of a video, grouped for encoding. Each group holds
/// `trajectories × scales` rows of `dim` values, trajectory-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub video_id: String,
    pub groups: Vec<GroupHeader>,
    pub scales: Vec<f32>,
    pub trajectories: usize,
    pub values: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSidecar {
    pub video_id: String,
    pub trajectories: usize,
    pub scales: Vec<f32>,
    pub groups: Vec<GroupHeader>,
}

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"TDD1";

impl DescriptorSet {
    /// Regroups the output of [`extract_tdds`].
    pub fn from_descriptors(
        video_id: &str,
        descriptors: &[TddDescriptor],
        layers: &[TapLayer],
        scales: &ScaleSet,
        trajectories: usize,
    ) -> Result<Self> {
        let mut groups = Vec::new();
        let mut values = Vec::new();
        let s_count = scales.len();
        let per_traj = layers.len() * NormKind::ALL.len() * s_count;
        ensure!(
            descriptors.len() == per_traj * trajectories,
            Error::DimensionMismatch(format!(
                "expected {} descriptors, got {}",
                per_traj * trajectories,
                descriptors.len()
            ))
        );
        for (li, layer) in layers.iter().enumerate() {
            for (ni, norm) in NormKind::ALL.into_iter().enumerate() {
                let g = li * NormKind::ALL.len() + ni;
                let mut dim = 0;
                let mut rows = Vec::new();
                for k in 0..trajectories {
                    for si in 0..s_count {
                        let d = &descriptors[k * per_traj + g * s_count + si];
                        debug_assert_eq!((d.trajectory, d.norm), (k, norm));
                        dim = d.values.len();
                        rows.extend_from_slice(&d.values);
                    }
                }
                if trajectories == 0 {
                    dim = 0;
                }
                groups.push(GroupHeader {
                    key: GroupKey {
                        stream: layer.stream,
                        layer: layer.name.clone(),
                        norm,
                    },
                    dim,
                });
                values.push(rows);
            }
        }
        Ok(Self {
            video_id: video_id.to_string(),
            groups,
            scales: scales.as_slice().iter().map(|&s| s as f32).collect(),
            trajectories,
            values,
        })
    }

    pub fn group_index(&self, key: &GroupKey) -> Option<usize> {
        self.groups.iter().position(|g| &g.key == key)
    }

    /// Rows of one group as slices of `dim` values.
    pub fn rows(&self, group: usize) -> impl Iterator<Item = &[f32]> {
        let dim = self.groups[group].dim.max(1);
        self.values[group].chunks_exact(dim)
    }

    /// Magic `TDD1`, `u32` group count `G`, trajectory count `K`, scale count
    /// `S`, `G` × `u32` dims, then each group's `K·S·dim` `f32` values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        for v in [self.groups.len(), self.trajectories, self.scales.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for g in &self.groups {
            out.extend_from_slice(&(g.dim as u32).to_le_bytes());
        }
        for vals in &self.values {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], sidecar: DescriptorSidecar, origin: &str) -> Result<Self> {
        ensure!(
            bytes.len() >= 16 && &bytes[..4] == DESCRIPTOR_MAGIC,
            Error::BadMagic(origin.into())
        );
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(4 + 4 * i..8 + 4 * i)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| Error::Truncated(format!("{origin}: header")))
        };
        let (g, k, s) = (word(0)?, word(1)?, word(2)?);
        ensure!(
            g == sidecar.groups.len() && k == sidecar.trajectories && s == sidecar.scales.len(),
            Error::DimensionMismatch(format!("{origin}: header disagrees with sidecar"))
        );
        let dims: Vec<usize> = (0..g).map(|i| word(3 + i)).collect::<Result<_>>()?;
        let mut off = 16 + 4 * g;
        let mut values = Vec::with_capacity(g);
        for &d in &dims {
            let count = k * s * d;
            let chunk = bytes
                .get(off..off + 4 * count)
                .ok_or_else(|| Error::Truncated(format!("{origin}: payload")))?;
            values.push(
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
            off += 4 * count;
        }
        let mut groups = sidecar.groups;
        for (gh, d) in groups.iter_mut().zip(dims) {
            gh.dim = d;
        }
        Ok(Self {
            video_id: sidecar.video_id,
            groups,
            scales: sidecar.scales,
            trajectories: k,
            values,
        })
    }

    pub fn sidecar(&self) -> DescriptorSidecar {
        DescriptorSidecar {
            video_id: self.video_id.clone(),
            trajectories: self.trajectories,
            scales: self.scales.clone(),
            groups: self.groups.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.encode())?;
        let sc = crate::trajectory::sidecar_path(path);
        let json = serde_json::to_vec_pretty(&self.sidecar()).map_err(|e| Error::json(&sc, e))?;
        write_atomic(&sc, &json)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sc_path = crate::trajectory::sidecar_path(path);
        let sc_bytes = fs::read(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
        let sidecar: DescriptorSidecar =
            serde_json::from_slice(&sc_bytes).map_err(|e| Error::json(&sc_path, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, sidecar, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajPoint;

    fn stack(h: usize, w: usize, l: usize, n: usize, data: Vec<f32>) -> FeatureMapStack {
        FeatureMapStack::new(h, w, l, n, "conv4", Stream::Spatial, 1.0, data).unwrap()
    }

    fn line(p: usize, x0: f32, dx: f32) -> Trajectory {
        Trajectory {
            points: (0..p)
                .map(|i| TrajPoint {
                    x: x0 + dx * i as f32,
                    y: 3.0,
                    z: i as u32,
                })
                .collect(),
        }
    }

    #[test]
    fn spatiotemporal_halves_channel_with_max_two() {
        let data = vec![2.0, 5.0, 1.0, 0.0, 0.5, 0.0];
        let s = normalize_spatiotemporal(&stack(1, 3, 1, 2, data)).unwrap();
        assert_eq!(s.stack.data(), &[1.0, 1.0, 0.5, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn zero_channel_stays_zero() {
        let data = vec![0.0, 3.0, 0.0, 1.0];
        let s = normalize_spatiotemporal(&stack(1, 2, 1, 2, data)).unwrap();
        assert!(s.stack.data().iter().all(|v| v.is_finite()));
        assert_eq!(s.stack.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn channel_norm_divides_by_cell_max() {
        let s = normalize_channel(&stack(1, 1, 1, 3, vec![2.0, 4.0, 8.0])).unwrap();
        assert_eq!(s.stack.data(), &[0.25, 0.5, 1.0]);
        let single = normalize_channel(&stack(2, 2, 1, 1, vec![0.3, 7.0, 1.0, 2.5])).unwrap();
        assert!(single.stack.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negative_input_is_rejected() {
        let s = stack(1, 1, 1, 2, vec![1.0, -0.5]);
        assert!(matches!(normalize_channel(&s), Err(Error::NegativeValue { .. })));
        assert!(normalize_spatiotemporal(&s).is_err());
    }

    #[test]
    fn constant_map_pools_to_p_times_value() {
        let c = NormalizedStack {
            stack: stack(8, 8, 16, 3, vec![0.4; 8 * 8 * 16 * 3]),
            kind: NormKind::Channel,
        };
        let d = pool_trajectory(&line(15, 1.0, 0.3), &c, 1.0, 1.0).unwrap();
        let expect = (0..15).fold(0f64, |a, _| a + 0.4f32 as f64) as f32;
        assert!(d.values.iter().all(|&v| v == expect));
        assert!((expect - 6.0).abs() < 1e-5);
    }

    #[test]
    fn frame_beyond_stack_is_an_error() {
        let c = NormalizedStack {
            stack: stack(4, 4, 16, 1, vec![1.0; 256]),
            kind: NormKind::Channel,
        };
        let mut t = line(15, 0.0, 0.0);
        t.points[14].z = 20;
        assert!(matches!(
            pool_trajectory(&t, &c, 1.0, 1.0),
            Err(Error::FrameOutOfRange { frame: 20, .. })
        ));
    }
}
