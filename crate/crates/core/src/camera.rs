//! Camera-motion model: corner detection, flow-based correspondences, robust
//! homography estimation, and frame rectification.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{round_half_up, FlowField, Image};

/// Projective map between consecutive frames, scaled so `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    h: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes `m` so that its bottom-right entry is exactly one.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        ensure!(
            s.is_finite() && s.abs() > 1e-12,
            Error::SingularHomography
        );
        let mut h = m;
        for row in &mut h {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        h[2][2] = 1.0;
        let out = Self { h };
        ensure!(
            out.h.iter().flatten().all(|v| v.is_finite()) && out.determinant().abs() > 1e-12,
            Error::SingularHomography
        );
        Ok(out)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.h
    }

    pub fn determinant(&self) -> f64 {
        to_na(&self.h).determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = to_na(&self.h)
            .try_inverse()
            .ok_or(Error::SingularHomography)?;
        Self::from_matrix(from_na(&inv))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(from_na(&(to_na(&self.h) * to_na(&other.h))))
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.h;
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
            (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
        ))
    }

    /// Row-major `f32` entries, the trajectory-sidecar serialization.
    pub fn to_row_major_f32(&self) -> [f32; 9] {
        let mut out = [0f32; 9];
        for (i, v) in self.h.iter().flatten().enumerate() {
            out[i] = *v as f32;
        }
        out
    }

    pub fn from_row_major_f32(v: &[f32; 9]) -> Result<Self> {
        let mut m = [[0f64; 3]; 3];
        for (i, x) in v.iter().enumerate() {
            m[i / 3][i % 3] = *x as f64;
        }
        Self::from_matrix(m)
    }
}

fn to_na(h: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        h[0][0], h[0][1], h[0][2], h[1][0], h[1][1], h[1][2], h[2][0], h[2][1], h[2][2],
    )
}

fn from_na(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0f64; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Position in frame `t`.
    pub p: [f64; 2],
    /// Position in frame `t + 1`.
    pub q: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Bound on the symmetric transfer distance, in pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 3.0,
            min_inliers: 10,
            seed: 0x5eed,
        }
    }
}

/// Smaller eigenvalue of the 2×2 gradient autocorrelation matrix, summed over
/// a 3×3 block around each pixel.
pub fn min_eigen_map(img: &Image) -> Result<Vec<f32>> {
    ensure!(img.channels() == 1, Error::NotGrayscale(img.channels()));
    let (h, w) = (img.height(), img.width());
    let mut gxx = vec![0f32; h * w];
    let mut gxy = vec![0f32; h * w];
    let mut gyy = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let dx = 0.5 * (img.at_clamped(xi + 1, yi, 0) - img.at_clamped(xi - 1, yi, 0));
            let dy = 0.5 * (img.at_clamped(xi, yi + 1, 0) - img.at_clamped(xi, yi - 1, 0));
            let i = y * w + x;
            gxx[i] = dx * dx;
            gxy[i] = dx * dy;
            gyy[i] = dy * dy;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut a, mut b, mut c) = (0f64, 0f64, 0f64);
            for dy in -1..=1 {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let i = yy * w + xx;
                    a += gxx[i] as f64;
                    b += gxy[i] as f64;
                    c += gyy[i] as f64;
                }
            }
            let half_tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out[y as usize * w + x as usize] = (half_tr - disc).max(0.0) as f32;
        }
    }
    Ok(out)
}

/// Min-eigenvalue corners, strongest first, greedily thinned so no two are
/// closer than `min_dist`.
pub fn detect_corners(
    img: &Image,
    max_count: usize,
    quality: f32,
    min_dist: f32,
) -> Result<Vec<(f32, f32)>> {
    let eig = min_eigen_map(img)?;
    let w = img.width();
    let max = eig.iter().copied().fold(0f32, f32::max);
    if max <= 0.0 || max_count == 0 {
        return Ok(Vec::new());
    }
    let threshold = quality * max;
    let mut candidates: Vec<usize> = (0..eig.len())
        .filter(|&i| eig[i] > 0.0 && eig[i] >= threshold)
        .collect();
    candidates.sort_by(|&a, &b| eig[b].total_cmp(&eig[a]).then(a.cmp(&b)));
    let min_d2 = min_dist * min_dist;
    let mut picked: Vec<(f32, f32)> = Vec::new();
    for i in candidates {
        let pt = ((i % w) as f32, (i / w) as f32);
        let clear = min_d2 <= 0.0
            || picked
                .iter()
                .all(|q| (q.0 - pt.0).powi(2) + (q.1 - pt.1).powi(2) >= min_d2);
        if clear {
            picked.push(pt);
            if picked.len() == max_count {
                break;
            }
        }
    }
    Ok(picked)
}

/// Grid matches `p → p + flow(p)`, sampled every `grid_step` pixels starting
/// half a step in. Matches whose target leaves the frame are dropped.
pub fn flow_correspondences(flow: &FlowField, grid_step: usize) -> Vec<Correspondence> {
    let step = grid_step.max(1);
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::new();
    for y in (step / 2..h).step_by(step) {
        for x in (step / 2..w).step_by(step) {
            let (u, v) = flow.at(x, y);
            let q = [x as f64 + u as f64, y as f64 + v as f64];
            if in_frame(q[0], q[1], w, h) {
                out.push(Correspondence {
                    p: [x as f64, y as f64],
                    q,
                });
            }
        }
    }
    out
}

/// Propagates points by flow sampled at their rounded position.
pub fn point_correspondences(points: &[(f32, f32)], flow: &FlowField) -> Vec<Correspondence> {
    let (h, w) = (flow.height(), flow.width());
    points
        .iter()
        .filter_map(|&(x, y)| {
            let xi = round_half_up(x as f64).clamp(0, w as i64 - 1) as usize;
            let yi = round_half_up(y as f64).clamp(0, h as i64 - 1) as usize;
            let (u, v) = flow.at(xi, yi);
            let q = [x as f64 + u as f64, y as f64 + v as f64];
            in_frame(q[0], q[1], w, h).then_some(Correspondence {
                p: [x as f64, y as f64],
                q,
            })
        })
        .collect()
}

fn in_frame(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Hartley normalization: centroid to the origin, mean distance `√2`.
fn normalizing_transform(pts: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform_point(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform: least-squares homography from four or
/// more matches.
pub fn fit_homography_dlt(matches: &[Correspondence]) -> Result<Homography> {
    let n = matches.len();
    ensure!(n >= 4, Error::InsufficientMatches(n));
    let ps: Vec<[f64; 2]> = matches.iter().map(|m| m.p).collect();
    let qs: Vec<[f64; 2]> = matches.iter().map(|m| m.q).collect();
    let tp = normalizing_transform(&ps).ok_or(Error::SingularHomography)?;
    let tq = normalizing_transform(&qs).ok_or(Error::SingularHomography)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, m) in matches.iter().enumerate() {
        let [x, y] = transform_point(&tp, m.p);
        let [u, v] = transform_point(&tq, m.q);
        let (r0, r1) = (2 * i, 2 * i + 1);
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::SingularHomography)?;
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let hv = v_t.row(smallest);
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8]);
    let tq_inv = tq.try_inverse().ok_or(Error::SingularHomography)?;
    Homography::from_matrix(from_na(&(tq_inv * hn * tp)))
}

/// Squared symmetric transfer distance `|q − Hp|² + |p − H⁻¹q|²`.
fn transfer_error(h: &Homography, h_inv: &Homography, m: &Correspondence) -> f64 {
    match (h.apply(m.p[0], m.p[1]), h_inv.apply(m.q[0], m.q[1])) {
        (Some(f), Some(b)) => {
            (f.0 - m.q[0]).powi(2) + (f.1 - m.q[1]).powi(2) + (b.0 - m.p[0]).powi(2) + (b.1 - m.p[1]).powi(2)
        }
        _ => f64::INFINITY,
    }
}

fn inlier_mask(h: &Homography, matches: &[Correspondence], thr2: f64) -> Option<Vec<bool>> {
    let h_inv = h.inverse().ok()?;
    Some(
        matches
            .iter()
            .map(|m| transfer_error(h, &h_inv, m) <= thr2)
            .collect(),
    )
}

/// Smallest trimming radius, in pixels.
const TRIM_FLOOR: f64 = 1e-3;

/// Inliers under `thr2` that are also within three robust standard
/// deviations of the fit. Stray outliers that happen to fall inside the
/// RANSAC threshold would otherwise pull the least-squares refit.
fn trimmed_mask(h: &Homography, matches: &[Correspondence], thr2: f64) -> Option<Vec<bool>> {
    let h_inv = h.inverse().ok()?;
    let err: Vec<f64> = matches.iter().map(|m| transfer_error(h, &h_inv, m)).collect();
    let mut inside: Vec<f64> = err.iter().copied().filter(|&e| e <= thr2).map(f64::sqrt).collect();
    if inside.is_empty() {
        return Some(vec![false; matches.len()]);
    }
    inside.sort_by(f64::total_cmp);
    let sigma = 1.4826 * inside[inside.len() / 2];
    let cut = (3.0 * sigma).max(TRIM_FLOOR).powi(2).min(thr2);
    Some(err.iter().map(|&e| e <= cut).collect())
}

/// RANSAC over 4-point samples, then a least-squares refit on the consensus
/// set. Matches are put into a canonical order first, so the result does not
/// depend on the order they were supplied in.
pub fn estimate_homography_ransac(
    matches: &[Correspondence],
    p: &RansacParams,
) -> Result<(Homography, Vec<bool>)> {
    let n = matches.len();
    ensure!(n >= 4, Error::InsufficientMatches(n));
    ensure!(
        p.iterations >= 1 && p.inlier_threshold > 0.0,
        Error::InvalidArgument("RANSAC needs iterations >= 1 and a positive threshold".into())
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&matches[a], &matches[b]);
        ma.p[0]
            .total_cmp(&mb.p[0])
            .then(ma.p[1].total_cmp(&mb.p[1]))
            .then(ma.q[0].total_cmp(&mb.q[0]))
            .then(ma.q[1].total_cmp(&mb.q[1]))
    });
    let sorted: Vec<Correspondence> = order.iter().map(|&i| matches[i]).collect();
    let thr2 = p.inlier_threshold * p.inlier_threshold;

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..p.iterations {
        let sample: Vec<Correspondence> = rand::seq::index::sample(&mut rng, n, 4)
            .into_iter()
            .map(|i| sorted[i])
            .collect();
        let Ok(h) = fit_homography_dlt(&sample) else {
            continue;
        };
        let Some(mask) = inlier_mask(&h, &sorted, thr2) else {
            continue;
        };
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (count, mut mask) = best.unwrap_or((0, vec![false; n]));
    ensure!(
        count >= p.min_inliers.max(4),
        Error::NoConsensus {
            min_inliers: p.min_inliers.max(4),
            best: count
        }
    );

    let mut h = refit(&sorted, &mask)?;
    for _ in 0..REFINE_ROUNDS {
        let Some(next) = trimmed_mask(&h, &sorted, thr2) else {
            break;
        };
        let next_count = next.iter().filter(|&&b| b).count();
        if next == mask || next_count < p.min_inliers.max(4) {
            break;
        }
        mask = next;
        h = refit(&sorted, &mask)?;
    }

    let mut out = vec![false; n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = mask[k];
    }
    Ok((h, out))
}

const REFINE_ROUNDS: usize = 5;

fn refit(sorted: &[Correspondence], mask: &[bool]) -> Result<Homography> {
    let inliers: Vec<Correspondence> = sorted
        .iter()
        .zip(mask)
        .filter_map(|(m, &keep)| keep.then_some(*m))
        .collect();
    fit_homography_dlt(&inliers)
}

/// `output(p) = img(H⁻¹ p)` sampled bilinearly; samples outside the source
/// frame are zero.
pub fn warp_frame(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.inverse()?;
    let (height, width, c) = (img.height(), img.width(), img.channels());
    let mut out = Image::zeros(height, width, c);
    for y in 0..height {
        for x in 0..width {
            let Some((sx, sy)) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            if !in_frame(sx, sy, width, height) {
                continue;
            }
            for ch in 0..c {
                out.set(x, y, ch, img.sample_bilinear(sx as f32, sy as f32, ch));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> Image {
        Image::from_fn(40, 40, |x, y| {
            if (10..30).contains(&x) && (12..28).contains(&y) {
                255.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = Image::filled(20, 20, 1, 9.0);
        assert!(detect_corners(&img, 100, 0.01, 3.0).unwrap().is_empty());
    }

    #[test]
    fn square_corners_are_found() {
        let corners = detect_corners(&square_image(), 4, 0.1, 5.0).unwrap();
        assert_eq!(corners.len(), 4);
        let truth = [(10.0, 12.0), (29.0, 12.0), (10.0, 27.0), (29.0, 27.0)];
        for t in truth {
            assert!(
                corners
                    .iter()
                    .any(|c| (c.0 - t.0).abs() <= 2.0 && (c.1 - t.1).abs() <= 2.0),
                "no corner near {t:?}: {corners:?}"
            );
        }
    }

    #[test]
    fn zero_quality_fills_up_to_max_count() {
        let img = Image::from_fn(16, 16, |x, y| ((x * 7 + y * 13) % 11) as f32);
        let corners = detect_corners(&img, 25, 0.0, 0.0).unwrap();
        assert_eq!(corners.len(), 25);
    }

    #[test]
    fn zero_flow_maps_points_to_themselves() {
        let m = flow_correspondences(&FlowField::zeros(20, 30), 5);
        assert_eq!(m.len(), 4 * 6);
        assert!(m.iter().all(|c| c.p == c.q));
    }

    #[test]
    fn constant_flow_shifts_targets_and_drops_exits() {
        let m = flow_correspondences(&FlowField::constant(20, 30, 3.0, 0.0), 5);
        assert!(m.iter().all(|c| c.q == [c.p[0] + 3.0, c.p[1]]));
        // x = 27 would land on 30, outside a 30-wide frame
        assert!(m.iter().all(|c| c.p[0] < 27.0));
        assert_eq!(m.len(), 4 * 5);
    }

    #[test]
    fn identity_matches_recover_identity() {
        let matches: Vec<_> = (0..50)
            .map(|i| {
                let p = [(i * 37 % 101) as f64, (i * 53 % 89) as f64];
                Correspondence { p, q: p }
            })
            .collect();
        let (h, mask) = estimate_homography_ransac(&matches, &RansacParams::default()).unwrap();
        assert!(mask.iter().all(|&b| b));
        let m = h.matrix();
        let id = Homography::identity().matrix();
        for r in 0..3 {
            for c in 0..3 {
                assert!((m[r][c] - id[r][c]).abs() < 1e-6);
            }
        }
        assert_eq!(m[2][2], 1.0);
    }

    #[test]
    fn three_matches_are_insufficient() {
        let m = vec![
            Correspondence {
                p: [0.0, 0.0],
                q: [0.0, 0.0]
            };
            3
        ];
        let err = estimate_homography_ransac(&m, &RansacParams::default()).unwrap_err();
        assert!(err.to_string().contains("insufficient matches"));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let h = Homography::from_matrix([[1.1, 0.05, 3.0], [-0.02, 0.95, -2.0], [1e-4, 2e-4, 1.0]]).unwrap();
        let id = h.compose(&h.inverse().unwrap()).unwrap().matrix();
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((id[r][c] - e).abs() < 1e-12);
            }
        }
        assert!(Homography::from_matrix([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = square_image();
        assert_eq!(warp_frame(&img, &Homography::identity()).unwrap(), img);
    }

    #[test]
    fn translation_warp_shifts_with_zero_fill() {
        let img = Image::from_fn(12, 16, |x, y| (x * 10 + y) as f32);
        let out = warp_frame(&img, &Homography::translation(5.0, 0.0)).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let expected = if x < 5 { 0.0 } else { img.at(x - 5, y, 0) };
                assert_eq!(out.at(x, y, 0), expected);
            }
        }
    }
}
