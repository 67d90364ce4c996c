use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    pub epochs: usize,
    /// Early stop once the projected-gradient spread of an epoch is below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Value of the constant feature that carries the bias.
    pub bias: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 100.0,
            epochs: 1000,
            tolerance: 1e-3,
            seed: 0x5f3,
            bias: 1.0,
        }
    }
}

/// One-vs-rest linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub dim: usize,
    /// `classes × dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub c: f64,
}

impl LinearModel {
    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                w.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() + self.biases[c]
            })
            .collect()
    }

    /// Highest score wins; ties go to the lowest class index.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        ensure!(
            x.len() == self.dim,
            Error::DimensionMismatch(format!("feature dim {} != model dim {}", x.len(), self.dim))
        );
        Ok(argmax(&self.scores(x)))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Dual coordinate descent for the L2-regularized hinge loss of one binary
/// problem, labels `y ∈ {−1, +1}`. Returns `(w, b)`.
fn train_binary(x: &[&[f32]], y: &[f64], p: &SvmParams, seed: u64) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let n = x.len();
    let mut w = vec![0f64; dim];
    let mut b = 0f64;
    let mut alpha = vec![0f64; n];
    let qd: Vec<f64> = x
        .iter()
        .map(|xi| xi.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() + p.bias * p.bias)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let xi = x[i];
            let dot: f64 = w.iter().zip(xi.iter()).map(|(a, &v)| a * v as f64).sum::<f64>() + b * p.bias;
            let g = y[i] * dot - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == p.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 && qd[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, p.c);
                let delta = (alpha[i] - old) * y[i];
                for (a, &v) in w.iter_mut().zip(xi.iter()) {
                    *a += delta * v as f64;
                }
                b += delta * p.bias;
            }
        }
        if pg_max - pg_min < p.tolerance {
            break;
        }
    }
    (w, b * p.bias)
}

/// Trains `classes` one-vs-rest problems. `labels[i] < classes`.
pub fn svm_train(fvs: &[&[f32]], labels: &[usize], classes: usize, p: &SvmParams) -> Result<LinearModel> {
    ensure!(
        fvs.len() == labels.len() && !fvs.is_empty(),
        Error::InvalidArgument(format!("{} vectors but {} labels", fvs.len(), labels.len()))
    );
    let dim = fvs[0].len();
    ensure!(
        fvs.iter().all(|f| f.len() == dim),
        Error::DimensionMismatch("training vectors differ in length".into())
    );
    ensure!(
        labels.iter().all(|&l| l < classes),
        Error::InvalidArgument(format!("label out of range for {classes} classes"))
    );
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    ensure!(
        present.len() >= 2,
        Error::InvalidArgument("svm needs at least two classes".into())
    );
    ensure!(p.c > 0.0, Error::InvalidArgument("svm C must be positive".into()));

    let per_class: Vec<(Vec<f64>, f64)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(fvs, &y, p, p.seed ^ (c as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        })
        .collect();
    let mut weights = Vec::with_capacity(classes * dim);
    let mut biases = Vec::with_capacity(classes);
    for (w, b) in per_class {
        weights.extend(w);
        biases.push(b);
    }
    Ok(LinearModel {
        dim,
        weights,
        biases,
        c: p.c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class() {
        let xs: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (0.5 + (i % 7) as f32 * 0.1), (i % 5) as f32 * 0.3 - 0.6]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let m = svm_train(&refs, &labels, 2, &SvmParams::default()).unwrap();
        for (x, &l) in xs.iter().zip(&labels) {
            assert_eq!(m.predict(x).unwrap(), l);
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let x = [1.0f32, 2.0];
        assert!(svm_train(&[&x, &x], &[0, 0], 2, &SvmParams::default()).is_err());
    }

    #[test]
    fn zero_vector_predicts_largest_bias() {
        let m = LinearModel {
            dim: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0],
            biases: vec![0.1, 0.3, 0.3],
            c: 1.0,
        };
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 1);
        assert!(m.predict(&[0.0]).is_err());
    }
}
