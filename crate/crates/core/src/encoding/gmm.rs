use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Samples per E-step chunk. Chunk statistics are summed in chunk order, so
/// results do not depend on the thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmParams {
    pub k: usize,
    pub max_iterations: usize,
    /// Stop once `(LL_t − LL_{t−1}) / |LL_{t−1}|` falls below this.
    pub tolerance: f64,
    pub seed: u64,
    pub max_samples: usize,
    pub kmeans_iterations: usize,
    /// Variance floor as a fraction of the mean per-dimension data variance.
    pub variance_floor: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            k: 16,
            max_iterations: 100,
            tolerance: 1e-5,
            seed: 0x6a11,
            max_samples: 100_000,
            kmeans_iterations: 5,
            variance_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `k × dim`, row-major.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub variance_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean per-sample log-likelihood of each E-step; the last entry belongs
    /// to the returned model.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn log_norms(&self) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let logdet: f64 = self.variance(k).iter().map(|v| v.ln()).sum();
                self.weights[k].ln() - 0.5 * (self.dim as f64 * LN_2PI + logdet)
            })
            .collect()
    }

    /// Writes posteriors `γ_k(x)` into `out` and returns `log p(x)`.
    pub(crate) fn posteriors_with(&self, log_norms: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        for (k, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((xi, m), v) in x.iter().zip(self.mean(k)).zip(self.variance(k)) {
                let d = xi - m;
                q += d * d / v;
            }
            *o = log_norms[k] - 0.5 * q;
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
        max + s.ln()
    }

    pub fn posteriors(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut g = vec![0.0; self.k()];
        let ll = self.posteriors_with(&self.log_norms(), x, &mut g);
        (g, ll)
    }

    /// Mean log-likelihood of row-major `samples`.
    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let n = samples.len() / self.dim;
        self.stats(samples).ll / n as f64
    }

    /// Sufficient statistics, second moments taken about the current means.
    fn stats(&self, samples: &[f64]) -> Stats {
        let (k, d) = (self.k(), self.dim);
        let norms = self.log_norms();
        let chunks: Vec<Stats> = samples
            .par_chunks(CHUNK * d)
            .map(|chunk| {
                let mut st = Stats::zeros(k, d);
                let mut g = vec![0.0; k];
                for x in chunk.chunks_exact(d) {
                    st.ll += self.posteriors_with(&norms, x, &mut g);
                    for (j, &gj) in g.iter().enumerate() {
                        st.n[j] += gj;
                        let m = self.mean(j);
                        for i in 0..d {
                            let dx = x[i] - m[i];
                            st.s1[j * d + i] += gj * dx;
                            st.s2[j * d + i] += gj * dx * dx;
                        }
                    }
                }
                st
            })
            .collect();
        let mut total = Stats::zeros(k, d);
        for c in chunks {
            total.add(&c);
        }
        total
    }

    /// Constrained maximization step from statistics gathered about the current means.
    fn m_step(&mut self, st: &Stats, n: usize) {
        let d = self.dim;
        for j in 0..self.k() {
            let nj = st.n[j];
            if nj <= 0.0 {
                // Dead component: keep its parameters, near-zero weight.
                self.weights[j] = f64::MIN_POSITIVE;
                continue;
            }
            self.weights[j] = nj / n as f64;
            for i in 0..d {
                let shift = st.s1[j * d + i] / nj;
                let var = st.s2[j * d + i] / nj - shift * shift;
                self.means[j * d + i] += shift;
                self.variances[j * d + i] = var.max(self.variance_floor);
            }
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
    }
}

struct Stats {
    n: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    ll: f64,
}

impl Stats {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: vec![0.0; k],
            s1: vec![0.0; k * d],
            s2: vec![0.0; k * d],
            ll: 0.0,
        }
    }

    fn add(&mut self, o: &Stats) {
        self.ll += o.ll;
        for (a, b) in self.n.iter_mut().zip(&o.n) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&o.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&o.s2) {
            *a += b;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(x: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len() / d;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn nearest(x: &[f64], centers: &[f64], d: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

fn lloyd(x: &[f64], d: usize, centers: &mut [f64], iterations: usize) -> Vec<usize> {
    let k = centers.len() / d;
    let mut assign = vec![0; x.len() / d];
    for it in 0..=iterations {
        assign = x.par_chunks(d).map(|r| nearest(r, centers, d)).collect();
        if it == iterations {
            break;
        }
        let mut sum = vec![0.0; k * d];
        let mut count = vec![0usize; k];
        for (r, &a) in x.chunks_exact(d).zip(&assign) {
            count[a] += 1;
            for i in 0..d {
                sum[a * d + i] += r[i];
            }
        }
        for j in 0..k {
            if count[j] > 0 {
                for i in 0..d {
                    centers[j * d + i] = sum[j * d + i] / count[j] as f64;
                }
            }
        }
    }
    assign
}

/// Diagonal-covariance EM on row-major `samples` (`n × dim`).
pub fn gmm_fit(samples: &[f64], dim: usize, p: &GmmParams) -> Result<GmmFit> {
    ensure!(
        dim > 0 && samples.len() % dim == 0,
        Error::DimensionMismatch(format!("{} values is not a multiple of {dim}", samples.len()))
    );
    ensure!(p.k >= 1, Error::InvalidArgument("gmm needs k >= 1".into()));
    ensure!(
        samples.iter().all(|v| v.is_finite()),
        Error::InvalidArgument("gmm samples must be finite".into())
    );
    let n_all = samples.len() / dim;
    ensure!(n_all >= p.k, Error::TooFewSamples { needed: p.k, got: n_all });

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let owned;
    let x: &[f64] = if n_all > p.max_samples {
        let mut idx = sample(&mut rng, n_all, p.max_samples).into_vec();
        idx.sort_unstable();
        owned = idx
            .iter()
            .flat_map(|&i| samples[i * dim..(i + 1) * dim].iter().copied())
            .collect::<Vec<_>>();
        &owned
    } else {
        samples
    };
    let n = x.len() / dim;

    let mut mean = vec![0.0; dim];
    for r in x.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for r in x.chunks_exact(dim) {
        for i in 0..dim {
            var[i] += (r[i] - mean[i]).powi(2);
        }
    }
    let mean_var = var.iter().sum::<f64>() / (n * dim) as f64;
    let floor = (p.variance_floor * mean_var).max(1e-12);

    let mut centers = kmeans_pp(x, dim, p.k, &mut rng);
    let assign = lloyd(x, dim, &mut centers, p.kmeans_iterations);
    let mut model = GmmModel {
        dim,
        weights: vec![0.0; p.k],
        means: centers,
        variances: vec![0.0; p.k * dim],
        variance_floor: floor,
    };
    let mut count = vec![0usize; p.k];
    for (r, &a) in x.chunks_exact(dim).zip(&assign) {
        count[a] += 1;
        for i in 0..dim {
            model.variances[a * dim + i] += (r[i] - model.means[a * dim + i]).powi(2);
        }
    }
    for j in 0..p.k {
        model.weights[j] = count[j].max(1) as f64;
        for i in 0..dim {
            let v = if count[j] > 0 {
                model.variances[j * dim + i] / count[j] as f64
            } else {
                var[i] / n as f64
            };
            model.variances[j * dim + i] = v.max(floor);
        }
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);

    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut st = model.stats(x);
    loop {
        let ll = st.ll / n as f64;
        if let Some(&prev) = history.last() {
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < p.tolerance {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if history.len() > p.max_iterations {
            break;
        }
        model.m_step(&st, n);
        st = model.stats(x);
    }
    Ok(GmmFit {
        model,
        log_likelihood: history,
        converged,
    })
}
