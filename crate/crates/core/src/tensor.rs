//! Image, video, flow and feature-map containers plus the resampling helpers
//! shared by every stage.
//!
//! Pixel buffers are row-major and channel-interleaved. Feature-map stacks are
//! stored frame-major (`z`, `y`, `x`, `n`) with the channel index fastest, so a
//! single map cell's channel vector is contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Rounding used for every continuous-to-grid conversion: `floor(x + 0.5)`.
#[inline]
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && channels > 0,
            Error::EmptyImage
        );
        ensure!(
            data.len() == height * width * channels,
            Error::DimensionMismatch(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ))
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite pixel value at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a single-channel image from a per-pixel function of `(x, y)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Reads with clamp-to-edge addressing.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y, c)
    }

    /// Bilinear sample with clamp-to-edge borders.
    pub fn sample_bilinear(&self, x: f32, y: f32, c: usize) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.at(x0, y0, c) * (1.0 - fx) + self.at(x1, y0, c) * fx;
        let bottom = self.at(x0, y1, c) * (1.0 - fx) + self.at(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Luma conversion (`0.299 R + 0.587 G + 0.114 B`). Single-channel images
    /// are returned unchanged.
    pub fn to_gray(&self) -> Result<Image> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect();
                Ok(Image {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data,
                })
            }
            c => Err(Error::InvalidArgument(format!(
                "cannot convert {c}-channel image to grayscale"
            ))),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: Vec<Image>,
}

impl Video {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        ensure!(
            !frames.is_empty(),
            Error::InvalidArgument("video needs at least one frame".into())
        );
        let first = &frames[0];
        ensure!(
            frames.iter().all(|f| f.same_shape(first)),
            Error::DimensionMismatch("video frames differ in shape".into())
        );
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    pub fn to_gray(&self) -> Result<Video> {
        let frames = self
            .frames
            .iter()
            .map(Image::to_gray)
            .collect::<Result<Vec<_>>>()?;
        Ok(Video { frames })
    }
}

/// Dense per-pixel displacement `(u, v)` in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, Error::EmptyImage);
        ensure!(
            u.len() == height * width && v.len() == height * width,
            Error::DimensionMismatch(format!(
                "{height}x{width} flow needs {} values per component",
                height * width
            ))
        );
        ensure!(
            u.iter().chain(v.iter()).all(|x| x.is_finite()),
            Error::InvalidArgument("non-finite flow value".into())
        );
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn into_components(self) -> (Vec<f32>, Vec<f32>) {
        (self.u, self.v)
    }

    /// Two-channel image view `(u, v)`.
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(self.u.len() * 2);
        for (u, v) in self.u.iter().zip(&self.v) {
            data.push(*u);
            data.push(*v);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 2,
            data,
        }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        ensure!(
            img.channels == 2,
            Error::DimensionMismatch(format!(
                "flow image needs 2 channels, got {}",
                img.channels
            ))
        );
        let (u, v) = img.data.chunks_exact(2).map(|p| (p[0], p[1])).unzip();
        Ok(Self {
            height: img.height,
            width: img.width,
            u,
            v,
        })
    }
}

/// `F` stacked flow fields, `u`/`v` interleaved per field: channel `2j` is the
/// `u` component of the `j`-th field in the stack, `2j + 1` its `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVolume(Image);

impl FlowVolume {
    pub fn from_image(img: Image) -> Result<Self> {
        ensure!(
            img.channels % 2 == 0,
            Error::DimensionMismatch(format!(
                "flow volume depth must be even, got {}",
                img.channels
            ))
        );
        Ok(Self(img))
    }

    pub fn depth(&self) -> usize {
        self.0.channels
    }

    pub fn stacked(&self) -> usize {
        self.0.channels / 2
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Spatial,
    Temporal,
}

impl Stream {
    pub fn tag(self) -> u8 {
        match self {
            Stream::Spatial => 0,
            Stream::Temporal => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stream::Spatial),
            1 => Some(Stream::Temporal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Spatial => "spatial",
            Stream::Temporal => "temporal",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-layer activations over a whole video: `H × W × L × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub channels: usize,
    pub layer: String,
    pub stream: Stream,
    pub scale: f32,
    data: Vec<f32>,
}

impl FeatureMapStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: usize,
        width: usize,
        length: usize,
        channels: usize,
        layer: impl Into<String>,
        stream: Stream,
        scale: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(length))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::DimensionOverflow(format!("{height}x{width}x{length}x{channels}")))?;
        ensure!(
            data.len() == expected,
            Error::DimensionMismatch(format!(
                "stack {height}x{width}x{length}x{channels} needs {expected} values, got {}",
                data.len()
            ))
        );
        Ok(Self {
            height,
            width,
            length,
            channels,
            layer: layer.into(),
            stream,
            scale,
            data,
        })
    }

    /// Stacks per-frame `H × W × N` maps (channel-interleaved images) along time.
    pub fn from_frames(
        frames: Vec<Image>,
        layer: impl Into<String>,
        stream: Stream,
        scale: f32,
    ) -> Result<Self> {
        ensure!(
            !frames.is_empty(),
            Error::InvalidArgument("no frames to stack".into())
        );
        let (h, w, n) = (frames[0].height, frames[0].width, frames[0].channels);
        ensure!(
            frames.iter().all(|f| f.height == h && f.width == w && f.channels == n),
            Error::DimensionMismatch("feature frames differ in shape".into())
        );
        let length = frames.len();
        let mut data = Vec::with_capacity(h * w * n * length);
        for f in frames {
            data.extend_from_slice(&f.data);
        }
        Self::new(h, w, length, n, layer, stream, scale, data)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, n: usize) -> usize {
        ((z * self.height + y) * self.width + x) * self.channels + n
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, n: usize) -> f32 {
        self.data[self.index(x, y, z, n)]
    }

    /// Channel vector of one map cell.
    #[inline]
    pub fn cell(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let start = self.index(x, y, z, 0);
        &self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            layer: self.layer.clone(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleSet(Vec<f64>);

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        ensure!(
            !scales.is_empty(),
            Error::InvalidArgument("scale set is empty".into())
        );
        ensure!(
            scales.iter().all(|s| s.is_finite() && *s > 0.0),
            Error::InvalidArgument("scales must be positive".into())
        );
        Ok(Self(scales))
    }

    /// `{1/2, 1/√2, 1, √2, 2}`.
    pub fn five_octave() -> Self {
        let r = std::f64::consts::SQRT_2;
        Self(vec![0.5, 1.0 / r, 1.0, r, 2.0])
    }

    /// `{1/√2, 1, √2}`, the reduced set used for small videos.
    pub fn three() -> Self {
        let r = std::f64::consts::SQRT_2;
        Self(vec![1.0 / r, 1.0, r])
    }

    pub fn single() -> Self {
        Self(vec![1.0])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScaleSet::new(v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

/// Output side length for scale `s`: `round(dim · s)`.
pub fn scaled_dim(dim: usize, s: f64) -> Result<usize> {
    ensure!(
        s.is_finite() && s > 0.0,
        Error::InvalidArgument(format!("scale must be positive, got {s}"))
    );
    let out = round_half_up(dim as f64 * s);
    ensure!(
        out >= 1,
        Error::InvalidArgument(format!("scale {s} shrinks dimension {dim} to zero"))
    );
    Ok(out as usize)
}

/// Bilinear resize with pixel-center alignment. Source coordinates are
/// `(dst + 0.5) · in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &Image, s: f64) -> Result<Image> {
    ensure!(img.height > 0 && img.width > 0, Error::EmptyImage);
    let out_h = scaled_dim(img.height, s)?;
    let out_w = scaled_dim(img.width, s)?;
    resize_to(img, out_h, out_w)
}

/// Bilinear resize to explicit output dimensions.
pub fn resize_to(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    ensure!(img.height > 0 && img.width > 0, Error::EmptyImage);
    ensure!(out_h > 0 && out_w > 0, Error::EmptyImage);
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let fy = img.height as f64 / out_h as f64;
    let fx = img.width as f64 / out_w as f64;
    let xs: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|x| axis_weights(x, fx, img.width))
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, wy) = axis_weights(y, fy, img.height);
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let top = img.at(x0, y0, ch) * (1.0 - wx) + img.at(x1, y0, ch) * wx;
                let bottom = img.at(x0, y1, ch) * (1.0 - wx) + img.at(x1, y1, ch) * wx;
                data.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

fn axis_weights(dst: usize, factor: f64, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f64 + 0.5) * factor - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Resizes every frame of `video` once per scale.
pub fn build_pyramid(video: &Video, scales: &ScaleSet) -> Result<Vec<Video>> {
    ensure!(
        !scales.is_empty(),
        Error::InvalidArgument("scale set is empty".into())
    );
    scales
        .as_slice()
        .iter()
        .map(|&s| {
            let frames = video
                .frames
                .iter()
                .map(|f| resize_bilinear(f, s))
                .collect::<Result<Vec<_>>>()?;
            Video::new(frames)
        })
        .collect()
}

/// Builds one `2F`-channel volume per input flow. Volume `t` holds flows
/// `t−F+1 … t`; indices before the first flow repeat flow 0, so the output
/// has exactly as many volumes as there are flows.
pub fn stack_flows(flows: &[FlowField], depth: usize) -> Result<Vec<FlowVolume>> {
    ensure!(
        depth >= 1,
        Error::InvalidArgument("stack depth must be at least 1".into())
    );
    ensure!(
        !flows.is_empty(),
        Error::InvalidArgument("no flow fields to stack".into())
    );
    let (h, w) = (flows[0].height, flows[0].width);
    ensure!(
        flows.iter().all(|f| f.height == h && f.width == w),
        Error::DimensionMismatch("flow fields differ in shape".into())
    );
    let channels = 2 * depth;
    let volumes = (0..flows.len())
        .map(|t| {
            let members: Vec<&FlowField> = (0..depth)
                .map(|j| {
                    let idx = t as isize - depth as isize + 1 + j as isize;
                    &flows[idx.max(0) as usize]
                })
                .collect();
            let mut data = Vec::with_capacity(h * w * channels);
            for i in 0..h * w {
                for f in &members {
                    data.push(f.u[i]);
                    data.push(f.v[i]);
                }
            }
            FlowVolume(Image {
                height: h,
                width: w,
                channels,
                data,
            })
        })
        .collect();
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |x, y| (3 * x + 5 * y) as f32)
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(6.25), 6);
        assert_eq!(round_half_up(3.75), 4);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(-0.5), 0);
        assert_eq!(round_half_up(-0.51), -1);
    }

    #[test]
    fn constant_image_survives_downscale() {
        let img = Image::filled(4, 4, 1, 7.0);
        let out = resize_bilinear(&img, 0.5).unwrap();
        assert_eq!((out.height(), out.width()), (2, 2));
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn ramp_downscale_matches_direct_formula() {
        let img = ramp(8, 8);
        let out = resize_bilinear(&img, 0.5).unwrap();
        // Direct formula: output pixel (i, j) sits at source (2i + 0.5, 2j + 0.5),
        // which averages the 2x2 block; on a linear ramp that is the ramp value there.
        for j in 0..4 {
            for i in 0..4 {
                let sx = 2.0 * i as f32 + 0.5;
                let sy = 2.0 * j as f32 + 0.5;
                let expected = 3.0 * sx + 5.0 * sy;
                assert!((out.at(i, j, 0) - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let img = ramp(4, 4);
        assert!(resize_bilinear(&img, 0.0).is_err());
        assert!(resize_bilinear(&img, -1.0).is_err());
        assert!(resize_bilinear(&img, 0.01).is_err());
    }

    #[test]
    fn pyramid_heights_follow_rounding_rule() {
        let frame = Image::zeros(224, 224, 1);
        let video = Video::new(vec![frame]).unwrap();
        let pyr = build_pyramid(&video, &ScaleSet::five_octave()).unwrap();
        let heights: Vec<usize> = pyr.iter().map(|v| v.height()).collect();
        assert_eq!(heights, vec![112, 158, 224, 317, 448]);
    }

    #[test]
    fn unit_pyramid_is_identity() {
        let video = Video::new(vec![ramp(6, 6), ramp(6, 6), ramp(6, 6)]).unwrap();
        let pyr = build_pyramid(&video, &ScaleSet::single()).unwrap();
        assert_eq!(pyr, vec![video]);
    }

    #[test]
    fn empty_scale_set_is_rejected() {
        assert!(ScaleSet::new(vec![]).is_err());
        assert!(ScaleSet::new(vec![1.0, 0.0]).is_err());
    }

    fn tagged_flow(tag: f32) -> FlowField {
        FlowField::constant(2, 3, tag, -tag)
    }

    fn members(vol: &FlowVolume) -> Vec<f32> {
        vol.as_image().data()[..vol.depth()]
            .chunks(2)
            .map(|p| p[0])
            .collect()
    }

    #[test]
    fn single_flow_is_padded_with_copies() {
        let vols = stack_flows(&[tagged_flow(4.0)], 10).unwrap();
        assert_eq!(vols.len(), 1);
        assert_eq!(vols[0].depth(), 20);
        assert_eq!(members(&vols[0]), vec![4.0; 10]);
    }

    #[test]
    fn depth_one_passes_flows_through() {
        let flows: Vec<_> = (0..4).map(|i| tagged_flow(i as f32)).collect();
        let vols = stack_flows(&flows, 1).unwrap();
        assert_eq!(vols.len(), 4);
        for (i, v) in vols.iter().enumerate() {
            assert_eq!(v.as_image(), &flows[i].to_image());
        }
    }

    #[test]
    fn stacking_index_arithmetic() {
        let flows: Vec<_> = (0..5).map(|i| tagged_flow(i as f32)).collect();
        let vols = stack_flows(&flows, 3).unwrap();
        // oracle: member j of volume t is flow max(t - F + 1 + j, 0)
        for (t, vol) in vols.iter().enumerate() {
            let expected: Vec<f32> = (0..3)
                .map(|j| (t as i32 - 2 + j).max(0) as f32)
                .collect();
            assert_eq!(members(vol), expected);
        }
        assert_eq!(members(&vols[0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(members(&vols[2]), vec![0.0, 1.0, 2.0]);
        assert_eq!(members(&vols[4]), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn stacking_rejects_bad_input() {
        assert!(stack_flows(&[], 3).is_err());
        assert!(stack_flows(&[tagged_flow(1.0)], 0).is_err());
    }
}
