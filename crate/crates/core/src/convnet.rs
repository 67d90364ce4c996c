//! Layer geometry and a fixed-filter convolutional feature extractor.
//!
//! Every convolution and pooling layer zero-pads its input by `⌊k/2⌋`, so a
//! layer only shrinks the map by its stride. A map cell at layer `m` then
//! corresponds to video position `(x, y) / r_m`, where `r_m` is the product of
//! the inverse strides up to `m`.
//!
//! The filters are unit-variance Gaussian draws from a seeded generator,
//! scaled by `1/√fan_in`. Trained weights are brought in as `.tdt` maps
//! instead of through this extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{round_half_up, FeatureMapStack, FlowVolume, Image, Stream, Video};
use crate::trajectory::TrajPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    /// Output channels of a convolution; pooling keeps its input channels.
    pub channels_out: usize,
    /// Cross-channel local response normalization after the activation.
    #[serde(default)]
    pub lrn: bool,
}

impl LayerSpec {
    pub fn conv(name: &str, kernel: usize, stride: usize, channels_out: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            kernel,
            stride,
            channels_out,
            lrn: false,
        }
    }

    pub fn pool(name: &str, kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Pool,
            kernel,
            stride,
            channels_out: channels,
            lrn: false,
        }
    }

    /// Output side for an input side under `⌊k/2⌋` padding.
    pub fn output_dim(&self, input: usize) -> usize {
        (input + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub size: usize,
    pub alpha: f32,
    pub beta: f32,
    pub k: f32,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            alpha: 5e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
    pub stream: Stream,
    pub input_channels: usize,
    pub tap_layers: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lrn: LrnParams,
}

/// Channel counts of the full-size two-stream layout, conv1 through pool5.
const REFERENCE_CHANNELS: [usize; 5] = [96, 256, 512, 512, 512];

impl NetSpec {
    fn with_channels(stream: Stream, input_channels: usize, ch: [usize; 5]) -> Self {
        let layers = vec![
            LayerSpec::conv("conv1", 7, 2, ch[0]),
            LayerSpec::pool("pool1", 3, 2, ch[0]),
            LayerSpec::conv("conv2", 5, 2, ch[1]),
            LayerSpec::pool("pool2", 3, 2, ch[1]),
            LayerSpec::conv("conv3", 3, 1, ch[2]),
            LayerSpec::conv("conv4", 3, 1, ch[3]),
            LayerSpec::conv("conv5", 3, 1, ch[4]),
            LayerSpec::pool("pool5", 3, 2, ch[4]),
        ];
        let tap_layers = match stream {
            Stream::Spatial => vec!["conv4".into(), "conv5".into()],
            Stream::Temporal => vec!["conv3".into(), "conv4".into()],
        };
        let seed = match stream {
            Stream::Spatial => 0x5a17,
            Stream::Temporal => 0x7e39,
        };
        Self {
            layers,
            stream,
            input_channels,
            tap_layers,
            seed,
            lrn: LrnParams::default(),
        }
    }

    /// Full channel counts (96, 256, 512, 512, 512).
    pub fn reference(stream: Stream, input_channels: usize) -> Self {
        Self::with_channels(stream, input_channels, REFERENCE_CHANNELS)
    }

    /// The reference layout with every channel count divided by 16.
    pub fn compact(stream: Stream, input_channels: usize) -> Self {
        Self::with_channels(stream, input_channels, REFERENCE_CHANNELS.map(|c| c / 16))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.layers.is_empty(),
            Error::InvalidArgument("network has no layers".into())
        );
        ensure!(
            self.input_channels >= 1,
            Error::InvalidArgument("network needs at least one input channel".into())
        );
        for l in &self.layers {
            ensure!(
                l.kernel >= 1 && l.stride >= 1,
                Error::InvalidArgument(format!("layer {} needs kernel and stride >= 1", l.name))
            );
            ensure!(
                l.kind == LayerKind::Pool || l.channels_out >= 1,
                Error::InvalidArgument(format!("layer {} has no output channels", l.name))
            );
        }
        for t in &self.tap_layers {
            ensure!(
                self.layers.iter().any(|l| &l.name == t),
                Error::InvalidArgument(format!("tap layer {t} is not in the network"))
            );
        }
        Ok(())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

/// `1 / den`: map size relative to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapRatio {
    pub den: u64,
}

impl MapRatio {
    pub fn value(self) -> f64 {
        1.0 / self.den as f64
    }
}

impl std::fmt::Display for MapRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "1")
        } else {
            write!(f, "1/{}", self.den)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub name: String,
    pub ratio: MapRatio,
    /// Side of the square input region one map cell sees.
    pub receptive_field: u64,
}

/// Map ratio and receptive field after each layer. With `j` the input-pixel
/// spacing of the layer's input cells (`j = 1/ratio` of the previous layer),
/// the receptive field grows by `(k − 1) · j`.
pub fn compute_geometry(net: &NetSpec) -> Result<Vec<LayerGeometry>> {
    ensure!(
        !net.layers.is_empty(),
        Error::InvalidArgument("network has no layers".into())
    );
    let mut den = 1u64;
    let mut rf = 1u64;
    let mut out = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        ensure!(
            l.kernel >= 1 && l.stride >= 1,
            Error::InvalidArgument(format!("layer {} needs kernel and stride >= 1", l.name))
        );
        rf += (l.kernel as u64 - 1) * den;
        den *= l.stride as u64;
        out.push(LayerGeometry {
            name: l.name.clone(),
            ratio: MapRatio { den },
            receptive_field: rf,
        });
    }
    Ok(out)
}

/// Video point to map cell: `(round(r·s·x), round(r·s·y))`, clamped into the
/// map; the frame index passes through.
pub fn map_coordinates(pt: TrajPoint, r: f64, s: f64, map_w: usize, map_h: usize) -> (usize, usize, u32) {
    let rs = r * s;
    let i = round_half_up(rs * pt.x as f64).clamp(0, map_w as i64 - 1) as usize;
    let j = round_half_up(rs * pt.y as f64).clamp(0, map_h as i64 - 1) as usize;
    (i, j, pt.z)
}

enum Stage {
    Conv {
        kernel: usize,
        stride: usize,
        cin: usize,
        cout: usize,
        /// `[cout][ky][kx][cin]`
        weights: Vec<f32>,
        lrn: Option<LrnParams>,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
}

/// A network instantiated with its seeded filters.
pub struct ConvNet {
    spec: NetSpec,
    stages: Vec<Stage>,
    /// Index of the deepest tap layer; later layers are never run.
    last_tap: usize,
}

impl ConvNet {
    pub fn new(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let last_tap = spec
            .tap_layers
            .iter()
            .filter_map(|t| spec.layer_index(t))
            .max()
            .ok_or_else(|| Error::InvalidArgument("network has no tap layers".into()))?;
        let mut channels = spec.input_channels;
        let mut stages = Vec::with_capacity(last_tap + 1);
        for (idx, l) in spec.layers.iter().enumerate().take(last_tap + 1) {
            match l.kind {
                LayerKind::Conv => {
                    let fan_in = l.kernel * l.kernel * channels;
                    let scale = 1.0 / (fan_in as f32).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        spec.seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    let weights = (0..l.channels_out * fan_in)
                        .map(|_| {
                            let z: f32 = StandardNormal.sample(&mut rng);
                            z * scale
                        })
                        .collect();
                    stages.push(Stage::Conv {
                        kernel: l.kernel,
                        stride: l.stride,
                        cin: channels,
                        cout: l.channels_out,
                        weights,
                        lrn: l.lrn.then_some(spec.lrn),
                    });
                    channels = l.channels_out;
                }
                LayerKind::Pool => stages.push(Stage::Pool {
                    kernel: l.kernel,
                    stride: l.stride,
                }),
            }
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
            last_tap,
        })
    }

    /// Conv weights of layer `idx` as `[cout][ky][kx][cin]`.
    pub fn conv_weights(&self, idx: usize) -> Option<&[f32]> {
        match self.stages.get(idx)? {
            Stage::Conv { weights, .. } => Some(weights),
            Stage::Pool { .. } => None,
        }
    }

    /// Runs one frame, returning the tap-layer maps in tap order.
    pub fn forward(&self, input: &Image) -> Result<Vec<Image>> {
        ensure!(
            input.channels() == self.spec.input_channels,
            Error::DimensionMismatch(format!(
                "{:?} net expects {} input channels, got {}",
                self.spec.stream,
                self.spec.input_channels,
                input.channels()
            ))
        );
        let mut taps: Vec<Option<Image>> = vec![None; self.spec.tap_layers.len()];
        let mut x = input.clone();
        for (idx, stage) in self.stages.iter().enumerate() {
            x = match stage {
                Stage::Conv {
                    kernel,
                    stride,
                    cin,
                    cout,
                    weights,
                    lrn,
                } => {
                    let mut y = conv_relu(&x, weights, *kernel, *stride, *cin, *cout);
                    if let Some(p) = lrn {
                        local_response_norm(&mut y, p);
                    }
                    y
                }
                Stage::Pool { kernel, stride } => max_pool(&x, *kernel, *stride),
            };
            let name = &self.spec.layers[idx].name;
            for (slot, t) in taps.iter_mut().zip(&self.spec.tap_layers) {
                if t == name {
                    *slot = Some(x.clone());
                }
            }
            if idx == self.last_tap {
                break;
            }
        }
        Ok(taps.into_iter().map(|t| t.expect("tap layer reached")).collect())
    }
}

/// Zero-padded convolution followed by `max(0, ·)`.
pub fn conv_relu(x: &Image, weights: &[f32], k: usize, stride: usize, cin: usize, cout: usize) -> Image {
    let (h, w) = (x.height(), x.width());
    let pad = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (w + 2 * (k / 2) - k) / stride + 1;
    let data = x.data();
    let mut out = Image::zeros(oh, ow, cout);
    let mut acc = vec![0f32; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.fill(0.0);
            for ky in 0..k {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let cell = &data[base..base + cin];
                    let woff = (ky * k + kx) * cin;
                    for (co, a) in acc.iter_mut().enumerate() {
                        let wv = &weights[co * k * k * cin + woff..co * k * k * cin + woff + cin];
                        *a += cell.iter().zip(wv).map(|(p, q)| p * q).sum::<f32>();
                    }
                }
            }
            for (co, a) in acc.iter().enumerate() {
                out.set(ox, oy, co, a.max(0.0));
            }
        }
    }
    out
}

/// Zero-padded max pooling.
pub fn max_pool(x: &Image, k: usize, stride: usize) -> Image {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let pad = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (w + 2 * (k / 2) - k) / stride + 1;
    let mut out = Image::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            0.0
                        } else {
                            x.at(ix as usize, iy as usize, ch)
                        };
                        m = m.max(v);
                    }
                }
                out.set(ox, oy, ch, m);
            }
        }
    }
    out
}

fn local_response_norm(x: &mut Image, p: &LrnParams) {
    let c = x.channels();
    let half = p.size / 2;
    for cell in x.data_mut().chunks_exact_mut(c) {
        let sq: Vec<f32> = cell.iter().map(|v| v * v).collect();
        let src = cell.to_vec();
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            let s: f32 = sq[lo..=hi].iter().sum();
            cell[ch] = src[ch] / (p.k + p.alpha / p.size as f32 * s).powf(p.beta);
        }
    }
}

pub enum NetInput<'a> {
    Frames(&'a Video),
    Volumes(&'a [FlowVolume]),
}

/// One stack per tap layer, frames processed independently and stacked in
/// time order.
pub fn extract_feature_maps(input: NetInput<'_>, net: &NetSpec, scale: f64) -> Result<Vec<FeatureMapStack>> {
    let frames: Vec<&Image> = match input {
        NetInput::Frames(v) => v.frames().iter().collect(),
        NetInput::Volumes(v) => v.iter().map(FlowVolume::as_image).collect(),
    };
    ensure!(
        !frames.is_empty(),
        Error::InvalidArgument("no input frames".into())
    );
    let first = frames[0];
    ensure!(
        frames
            .iter()
            .all(|f| f.height() == first.height() && f.width() == first.width() && f.channels() == first.channels()),
        Error::DimensionMismatch("input frames differ in shape".into())
    );
    let model = ConvNet::new(net)?;
    let per_frame: Vec<Vec<Image>> = frames
        .par_iter()
        .map(|f| model.forward(f))
        .collect::<Result<_>>()?;
    let mut by_tap: Vec<Vec<Image>> = vec![Vec::with_capacity(frames.len()); net.tap_layers.len()];
    for taps in per_frame {
        for (slot, map) in by_tap.iter_mut().zip(taps) {
            slot.push(map);
        }
    }
    by_tap
        .into_iter()
        .zip(&net.tap_layers)
        .map(|(maps, name)| FeatureMapStack::from_frames(maps, name.clone(), net.stream, scale as f32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry_rows() {
        let g = compute_geometry(&NetSpec::reference(Stream::Spatial, 3)).unwrap();
        let dens: Vec<u64> = g.iter().map(|l| l.ratio.den).collect();
        let rfs: Vec<u64> = g.iter().map(|l| l.receptive_field).collect();
        assert_eq!(dens, vec![2, 4, 8, 16, 16, 16, 16, 32]);
        assert_eq!(rfs, vec![7, 11, 27, 43, 75, 107, 139, 171]);
    }

    #[test]
    fn trivial_geometries() {
        let one = NetSpec {
            layers: vec![LayerSpec::conv("c", 1, 1, 1)],
            stream: Stream::Spatial,
            input_channels: 1,
            tap_layers: vec!["c".into()],
            seed: 0,
            lrn: LrnParams::default(),
        };
        let g = compute_geometry(&one).unwrap();
        assert_eq!((g[0].ratio.den, g[0].receptive_field), (1, 1));

        let two = NetSpec {
            layers: vec![LayerSpec::conv("a", 3, 1, 1), LayerSpec::conv("b", 3, 1, 1)],
            ..one.clone()
        };
        let g = compute_geometry(&two).unwrap();
        assert_eq!((g[1].ratio.den, g[1].receptive_field), (1, 5));

        let empty = NetSpec {
            layers: vec![],
            ..one
        };
        assert!(compute_geometry(&empty).is_err());
    }

    #[test]
    fn compact_channels_are_one_sixteenth() {
        let n = NetSpec::compact(Stream::Temporal, 20);
        let ch: Vec<usize> = n.layers.iter().map(|l| l.channels_out).collect();
        assert_eq!(ch, vec![6, 6, 16, 16, 32, 32, 32, 32]);
        assert_eq!(n.tap_layers, vec!["conv3", "conv4"]);
    }

    #[test]
    fn stride_two_halves_with_padding() {
        let img = Image::filled(32, 32, 1, 1.0);
        let y = conv_relu(&img, &vec![0.1; 49], 7, 2, 1, 1);
        assert_eq!((y.height(), y.width()), (16, 16));
        assert_eq!(LayerSpec::conv("c", 7, 2, 1).output_dim(33), 17);
    }

    #[test]
    fn map_coordinate_rounding_and_clamping() {
        let p = TrajPoint { x: 100.0, y: 60.0, z: 3 };
        assert_eq!(map_coordinates(p, 1.0 / 16.0, 1.0, 14, 14), (6, 4, 3));
        let q = TrajPoint { x: 5.0, y: 7.0, z: 0 };
        assert_eq!(map_coordinates(q, 1.0, 1.0, 10, 10), (5, 7, 0));
        let r = TrajPoint { x: 223.0, y: 0.0, z: 0 };
        // round(223 · 2/32) = round(13.94) = 14 → clamped to 13
        assert_eq!(map_coordinates(r, 1.0 / 32.0, 2.0, 14, 14).0, 13);
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let mut n = NetSpec::compact(Stream::Spatial, 3);
        n.tap_layers.push("fc6".into());
        assert!(ConvNet::new(&n).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let net = NetSpec::compact(Stream::Spatial, 3);
        let v = Video::new(vec![Image::zeros(16, 16, 1)]).unwrap();
        assert!(extract_feature_maps(NetInput::Frames(&v), &net, 1.0).is_err());
    }

    #[test]
    fn lrn_matches_formula() {
        let mut img = Image::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = LrnParams {
            size: 3,
            alpha: 0.3,
            beta: 0.5,
            k: 1.0,
        };
        local_response_norm(&mut img, &p);
        let expect0 = 1.0 / (1.0f32 + 0.1 * (1.0 + 4.0)).powf(0.5);
        let expect1 = 2.0 / (1.0f32 + 0.1 * 14.0).powf(0.5);
        assert!((img.at(0, 0, 0) - expect0).abs() < 1e-6);
        assert!((img.at(0, 0, 1) - expect1).abs() < 1e-6);
    }
}
