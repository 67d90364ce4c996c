//! Dense optical flow: coarse-to-fine Lucas–Kanade, median filtering of flow
//! fields, 8-bit quantization, and warped flow.

use serde::{Deserialize, Serialize};

use crate::camera::{warp_frame, Homography};
use crate::error::{ensure, Error, Result};
use crate::tensor::{resize_to, round_half_up, FlowField, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    /// Side of the square integration window (odd).
    pub window: usize,
    /// Gauss–Newton updates per pyramid level.
    pub iterations: usize,
    /// Pixels whose window-averaged structure tensor has a smaller eigenvalue
    /// below this floor receive no update.
    pub eig_floor: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            window: 15,
            iterations: 3,
            eig_floor: 1e-3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window >= 3 && self.window % 2 == 1,
            Error::InvalidArgument(format!("flow window must be odd and >= 3, got {}", self.window))
        );
        ensure!(
            self.pyramid_levels >= 1,
            Error::InvalidArgument("flow needs at least one pyramid level".into())
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct MedianKernel(usize);

impl MedianKernel {
    pub fn new(size: usize) -> Result<Self> {
        ensure!(
            size >= 3 && size % 2 == 1,
            Error::InvalidArgument(format!("median kernel must be odd and >= 3, got {size}"))
        );
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }
}

impl Default for MedianKernel {
    fn default() -> Self {
        Self(3)
    }
}

impl TryFrom<usize> for MedianKernel {
    type Error = Error;

    fn try_from(v: usize) -> Result<Self> {
        MedianKernel::new(v)
    }
}

impl From<MedianKernel> for usize {
    fn from(k: MedianKernel) -> Self {
        k.0
    }
}

/// Estimates the flow `w` with `a(p) ≈ b(p + w(p))`.
pub fn estimate_flow(a: &Image, b: &Image, p: &FlowParams) -> Result<FlowField> {
    p.validate()?;
    ensure!(a.channels() == 1, Error::NotGrayscale(a.channels()));
    ensure!(b.channels() == 1, Error::NotGrayscale(b.channels()));
    ensure!(
        a.height() == b.height() && a.width() == b.width(),
        Error::DimensionMismatch(format!(
            "flow frames {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ))
    );

    let pyr_a = gray_pyramid(a, p.pyramid_levels)?;
    let pyr_b = gray_pyramid(b, p.pyramid_levels)?;
    let radius = p.window / 2;

    let coarsest = pyr_a.last().unwrap();
    let mut u = vec![0f32; coarsest.height() * coarsest.width()];
    let mut v = u.clone();
    let mut prev_dims = (coarsest.height(), coarsest.width());

    for (la, lb) in pyr_a.iter().zip(&pyr_b).rev() {
        let (h, w) = (la.height(), la.width());
        if (h, w) != prev_dims {
            let field = FlowField::new(prev_dims.0, prev_dims.1, u, v)?;
            let up = resize_to(&field.to_image(), h, w)?;
            let sx = w as f32 / prev_dims.1 as f32;
            let sy = h as f32 / prev_dims.0 as f32;
            let (nu, nv) = FlowField::from_image(&up)?.into_components();
            u = nu.into_iter().map(|x| x * sx).collect();
            v = nv.into_iter().map(|x| x * sy).collect();
            prev_dims = (h, w);
        }
        refine_level(la, lb, &mut u, &mut v, radius, p);
    }
    FlowField::new(a.height(), a.width(), u, v)
}

/// Coarser levels hold too little texture for the window to lock on.
const MIN_LEVEL_SIDE: usize = 24;

fn gray_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    let mut out = vec![smooth3(img)];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.height() < 2 * MIN_LEVEL_SIDE || last.width() < 2 * MIN_LEVEL_SIDE {
            break;
        }
        let h = (last.height() + 1) / 2;
        let w = (last.width() + 1) / 2;
        out.push(resize_to(&smooth5(last), h, w)?);
    }
    Ok(out)
}

/// Separable `[1 2 1] / 4` smoothing with clamped borders.
fn smooth3(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut tmp = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let s = img.at_clamped(xi - 1, yi, 0) + 2.0 * img.at(x, y, 0) + img.at_clamped(xi + 1, yi, 0);
            tmp.set(x, y, 0, s * 0.25);
        }
    }
    let mut out = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let s = tmp.at_clamped(xi, yi - 1, 0) + 2.0 * tmp.at(x, y, 0) + tmp.at_clamped(xi, yi + 1, 0);
            out.set(x, y, 0, s * 0.25);
        }
    }
    out
}

/// Separable `[1 4 6 4 1] / 16` anti-aliasing filter with clamped borders.
fn smooth5(img: &Image) -> Image {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = (img.height(), img.width());
    let mut tmp = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let s: f32 = (0..5).map(|k| K[k] * img.at_clamped(x as isize + k as isize - 2, y as isize, 0)).sum();
            tmp.set(x, y, 0, s);
        }
    }
    let mut out = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let s: f32 = (0..5).map(|k| K[k] * tmp.at_clamped(x as isize, y as isize + k as isize - 2, 0)).sum();
            out.set(x, y, 0, s);
        }
    }
    out
}

fn refine_level(a: &Image, b: &Image, u: &mut [f32], v: &mut [f32], radius: usize, p: &FlowParams) {
    let (h, w) = (a.height(), a.width());
    let mut ix = vec![0f32; h * w];
    let mut iy = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            ix[y * w + x] = 0.5 * (a.at_clamped(xi + 1, yi, 0) - a.at_clamped(xi - 1, yi, 0));
            iy[y * w + x] = 0.5 * (a.at_clamped(xi, yi + 1, 0) - a.at_clamped(xi, yi - 1, 0));
        }
    }
    let gxx = box_mean(&mul(&ix, &ix), h, w, radius);
    let gxy = box_mean(&mul(&ix, &iy), h, w, radius);
    let gyy = box_mean(&mul(&iy, &iy), h, w, radius);

    let max_step2 = (radius * radius) as f64;
    let mut it = vec![0f32; h * w];
    for _ in 0..p.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let warped = b.sample_bilinear(x as f32 + u[i], y as f32 + v[i], 0);
                it[i] = warped - a.at(x, y, 0);
            }
        }
        let bx = box_mean(&mul(&ix, &it), h, w, radius);
        let by = box_mean(&mul(&iy, &it), h, w, radius);
        for i in 0..h * w {
            let (g11, g12, g22) = (gxx[i] as f64, gxy[i] as f64, gyy[i] as f64);
            let half_tr = 0.5 * (g11 + g22);
            let disc = (0.25 * (g11 - g22).powi(2) + g12 * g12).sqrt();
            if half_tr - disc < p.eig_floor as f64 {
                continue;
            }
            let det = g11 * g22 - g12 * g12;
            let (r1, r2) = (-(bx[i] as f64), -(by[i] as f64));
            let du = (g22 * r1 - g12 * r2) / det;
            let dv = (g11 * r2 - g12 * r1) / det;
            // a step beyond the window is not a linearization we can trust
            if du * du + dv * dv > max_step2 {
                continue;
            }
            u[i] += du as f32;
            v[i] += dv as f32;
        }
    }
}

fn mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Mean over a `(2r+1)²` window with clamp-to-edge addressing.
fn box_mean(src: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let r = r as isize;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0f32;
            for dx in -r..=r {
                s += row[(x as isize + dx).clamp(0, w as isize - 1) as usize];
            }
            tmp[y * w + x] = s * norm;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0f32;
            for dy in -r..=r {
                s += tmp[(y as isize + dy).clamp(0, h as isize - 1) as usize * w + x];
            }
            out[y * w + x] = s * norm;
        }
    }
    out
}

/// Component-wise `k × k` median with clamp-to-edge borders.
pub fn median_filter_flow(f: &FlowField, k: MedianKernel) -> FlowField {
    let (h, w) = (f.height(), f.width());
    let u = median_plane(f.u(), h, w, k.size());
    let v = median_plane(f.v(), h, w, k.size());
    FlowField::new(h, w, u, v).expect("median of finite values is finite")
}

fn median_plane(src: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(src[yy * w + xx]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*m);
        }
    }
    out
}

/// Maps each component linearly from `[−bound, bound]` onto `0..=255`,
/// clamped and rounded.
pub fn quantize_flow(f: &FlowField, bound: f32) -> Result<FlowField> {
    ensure!(
        bound.is_finite() && bound > 0.0,
        Error::InvalidArgument(format!("quantization bound must be positive, got {bound}"))
    );
    let q = |x: f32| {
        let t = 255.0 * (x as f64 + bound as f64) / (2.0 * bound as f64);
        round_half_up(t).clamp(0, 255) as f32
    };
    FlowField::new(
        f.height(),
        f.width(),
        f.u().iter().map(|&x| q(x)).collect(),
        f.v().iter().map(|&x| q(x)).collect(),
    )
}

/// Flow between `a` and `b` after undoing the camera motion `h` (which maps
/// frame `a` coordinates into frame `b`).
pub fn warped_flow(a: &Image, b: &Image, h: &Homography, p: &FlowParams) -> Result<FlowField> {
    let inverse = h.inverse()?;
    let rectified = warp_frame(b, &inverse)?;
    estimate_flow(a, &rectified, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(0.0..255.0))
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn identical_frames_have_no_motion() {
        let a = noise(40, 48, 1);
        let f = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.u().iter().chain(f.v()).all(|x| x.abs() < 0.1));
    }

    #[test]
    fn wrapped_shift_is_recovered() {
        let (h, w) = (64, 64);
        let a = smooth3(&smooth3(&noise(h, w, 7)));
        let b = Image::from_fn(h, w, |x, y| a.at((x + w - 3) % w, y, 0));
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in 10..h - 10 {
            for x in 10..w - 10 {
                let (u, v) = f.at(x, y);
                us.push(u);
                vs.push(v);
            }
        }
        let (mu, mv) = (median(us), median(vs));
        assert!((mu - 3.0).abs() < 0.5, "median u = {mu}");
        assert!(mv.abs() < 0.5, "median v = {mv}");
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let a = noise(10, 10, 1);
        let b = noise(10, 12, 2);
        assert!(matches!(
            estimate_flow(&a, &b, &FlowParams::default()),
            Err(Error::DimensionMismatch(_))
        ));
        let rgb = Image::zeros(10, 10, 3);
        assert!(estimate_flow(&rgb, &rgb, &FlowParams::default()).is_err());
    }

    #[test]
    fn bad_params_are_rejected() {
        let a = noise(10, 10, 1);
        let p = FlowParams {
            window: 4,
            ..Default::default()
        };
        assert!(estimate_flow(&a, &a, &p).is_err());
    }

    #[test]
    fn median_keeps_constant_field() {
        let f = FlowField::constant(6, 5, 1.25, -3.0);
        assert_eq!(median_filter_flow(&f, MedianKernel::default()), f);
    }

    #[test]
    fn median_removes_single_outlier() {
        let mut u = vec![2.0f32; 25];
        u[12] = 90.0;
        let f = FlowField::new(5, 5, u, vec![0.0; 25]).unwrap();
        let m = median_filter_flow(&f, MedianKernel::default());
        assert!(m.u().iter().all(|&x| x == 2.0));
    }

    #[test]
    fn median_matches_sort_and_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (16, 16);
        let u: Vec<f32> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f32> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = FlowField::new(h, w, u.clone(), v.clone()).unwrap();
        let m = median_filter_flow(&f, MedianKernel::new(3).unwrap());
        for (plane, got) in [(&u, m.u()), (&v, m.v())] {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut vals = Vec::new();
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            let cy = yy.clamp(0, h as isize - 1) as usize;
                            let cx = xx.clamp(0, w as isize - 1) as usize;
                            vals.push(plane[cy * w + cx]);
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(got[y as usize * w + x as usize], vals[4]);
                }
            }
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(MedianKernel::new(4).is_err());
        assert!(MedianKernel::new(1).is_err());
    }

    #[test]
    fn quantization_endpoints() {
        let f = FlowField::new(1, 5, vec![0.0, 20.0, 35.0, -20.0, -50.0], vec![0.0; 5]).unwrap();
        let q = quantize_flow(&f, 20.0).unwrap();
        // linear map oracle: round(255 * (x + 20) / 40)
        assert_eq!(q.u(), &[128.0, 255.0, 255.0, 0.0, 0.0]);
        assert!(quantize_flow(&f, 0.0).is_err());
        assert!(quantize_flow(&f, -1.0).is_err());
    }

    #[test]
    fn quantization_is_monotone_in_range() {
        let xs: Vec<f32> = (-400..=400).map(|i| i as f32 * 0.1).collect();
        let f = FlowField::new(1, xs.len(), xs.clone(), xs).unwrap();
        let q = quantize_flow(&f, 20.0).unwrap();
        assert!(q.u().windows(2).all(|w| w[0] <= w[1]));
        assert!(q.u().iter().all(|&x| (0.0..=255.0).contains(&x) && x.fract() == 0.0));
    }

    #[test]
    fn identity_homography_leaves_flow_unchanged() {
        let a = smooth3(&noise(32, 32, 5));
        let b = Image::from_fn(32, 32, |x, y| a.at((x + 31) % 32, y, 0));
        let p = FlowParams::default();
        let direct = estimate_flow(&a, &b, &p).unwrap();
        let warped = warped_flow(&a, &b, &Homography::identity(), &p).unwrap();
        assert_eq!(direct, warped);
    }
}
