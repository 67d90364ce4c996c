use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tdd_core::encoding::{
    fisher_encode, fuse, gmm_fit, pca_fit, svm_train, FisherOptions, FisherVector, GmmModel, GmmParams, SvmParams,
};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn fisher_vector_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, d) in [(16usize, 16usize), (256, 64)] {
        let model = GmmModel {
            dim: d,
            weights: vec![1.0 / k as f64; k],
            means: (0..k * d).map(|_| gaussian(&mut rng)).collect(),
            variances: vec![1.0; k * d],
            variance_floor: 1e-4,
        };
        let x: Vec<f64> = (0..5 * d).map(|_| gaussian(&mut rng)).collect();
        assert_eq!(fisher_encode(&model, &x, FisherOptions::default()).unwrap().len(), 2 * k * d);
    }
}

#[test]
fn em_log_likelihood_is_monotone() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let centers: Vec<f64> = (0..4 * 3).map(|_| 4.0 * gaussian(&mut rng)).collect();
        let x: Vec<f64> = (0..800)
            .flat_map(|i| {
                let c = (i % 4) * 3;
                (0..3).map(|j| centers[c + j] + gaussian(&mut rng)).collect::<Vec<_>>()
            })
            .collect();
        let fit = gmm_fit(&x, 3, &GmmParams { k: 6, seed, ..Default::default() }).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] - w[0] >= -1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
        assert!((fit.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(fit.model.variances.iter().all(|&v| v >= fit.model.variance_floor));
    }
}

#[test]
fn single_mixture_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (500, 4);
    let x: Vec<f64> = (0..n * d).map(|i| (i % d) as f64 + 0.3 * gaussian(&mut rng)).collect();
    let fit = gmm_fit(&x, d, &GmmParams { k: 1, ..Default::default() }).unwrap();
    for j in 0..d {
        let col: Vec<f64> = x.iter().skip(j).step_by(d).copied().collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((fit.model.means[j] - mean).abs() < 1e-8);
        assert!((fit.model.variances[j] - var).abs() < 1e-8);
    }
}

/// Evaluates the Gaussian densities directly instead of in log space.
fn direct_fisher(m: &GmmModel, x: &[Vec<f64>]) -> Vec<f64> {
    let (k, d) = (m.k(), m.dim);
    let mut out = vec![0.0; 2 * k * d];
    for xi in x {
        let dens: Vec<f64> = (0..k)
            .map(|j| {
                let mut p = m.weights[j];
                for i in 0..d {
                    let var = m.variances[j * d + i];
                    let diff = xi[i] - m.means[j * d + i];
                    p *= (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                }
                p
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for j in 0..k {
            let gamma = dens[j] / total;
            for i in 0..d {
                let z = (xi[i] - m.means[j * d + i]) / m.variances[j * d + i].sqrt();
                out[j * 2 * d + i] += gamma * z / (x.len() as f64 * m.weights[j].sqrt());
                out[j * 2 * d + d + i] += gamma * (z * z - 1.0) / (x.len() as f64 * (2.0 * m.weights[j]).sqrt());
            }
        }
    }
    out
}

#[test]
fn fisher_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (k, d) = (3, 4);
        let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let m = GmmModel {
            dim: d,
            weights,
            means: (0..k * d).map(|_| gaussian(&mut rng)).collect(),
            variances: (0..k * d).map(|_| rng.random_range(0.5..2.0)).collect(),
            variance_floor: 1e-4,
        };
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
        let flat: Vec<f64> = x.concat();
        let raw = fisher_encode(&m, &flat, FisherOptions { improved: false }).unwrap();
        let expect = direct_fisher(&m, &x);
        for (a, b) in raw.values.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        let improved = fisher_encode(&m, &flat, FisherOptions::default()).unwrap();
        let ssr: Vec<f64> = expect.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
        let norm = ssr.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in improved.values.iter().zip(&ssr) {
            assert!((*a as f64 - b / norm).abs() < 1e-6);
        }
    }
}

#[test]
fn fused_vectors_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let parts: Vec<FisherVector> = (0..rng.random_range(1..5))
            .map(|_| FisherVector {
                values: (0..rng.random_range(1..40)).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
                normalized: true,
                empty: false,
            })
            .collect();
        assert!((fuse(&parts).unwrap().norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pca_subspace_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // points in a 2-d affine subspace of R^5
    let (a, b): (Vec<f64>, Vec<f64>) = ((0..5).map(|_| gaussian(&mut rng)).collect(), (0..5).map(|_| gaussian(&mut rng)).collect());
    let offset: Vec<f64> = (0..5).map(|_| 3.0 * gaussian(&mut rng)).collect();
    let rows: Vec<f32> = (0..200)
        .flat_map(|_| {
            let (s, t) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            (0..5).map(|i| (offset[i] + s * a[i] + t * b[i]) as f32).collect::<Vec<_>>()
        })
        .collect();
    let m = pca_fit(&rows, 5, 2).unwrap();
    for x in rows.chunks(5) {
        let r = m.reconstruct(&m.transform(x).unwrap());
        for (p, q) in r.iter().zip(x) {
            assert!((p - *q as f64).abs() < 1e-5);
        }
    }

    let full: Vec<f32> = (0..300 * 4).map(|_| gaussian(&mut rng) as f32).collect();
    let m = pca_fit(&full, 4, 4).unwrap();
    let (x, y) = (&full[..4], &full[4..8]);
    let (tx, ty) = (m.transform(x).unwrap(), m.transform(y).unwrap());
    let d0: f64 = x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
    let d1: f64 = tx.iter().zip(&ty).map(|(p, q)| (p - q).powi(2)).sum();
    assert!((d0.sqrt() - d1.sqrt()).abs() < 1e-5);
}

#[test]
fn pca_decorrelates_anisotropic_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let scales = [3.0, 1.5, 0.5];
    let rows: Vec<f32> = (0..4000)
        .flat_map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * gaussian(&mut rng)).collect();
            // mix axes so the covariance is not already diagonal
            [z[0] + 0.5 * z[1], z[1] - 0.3 * z[2], z[2] + 0.2 * z[0]].map(|v| v as f32)
        })
        .collect();
    let m = pca_fit(&rows, 3, 3).unwrap();
    let y = m.transform_rows(&rows).unwrap();
    let n = y.len() / 3;
    for i in 0..3 {
        for j in 0..3 {
            let c: f64 = y.chunks(3).map(|r| r[i] * r[j]).sum::<f64>() / n as f64;
            if i == j {
                assert!((c - m.eigenvalues[i]).abs() < 1e-6 * m.eigenvalues[i].max(1.0));
            } else {
                assert!(c.abs() < 5e-2);
            }
        }
    }
}

#[test]
fn svm_conflicting_duplicate_still_trains() {
    let x = [vec![1.0f32, 0.0], vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -1.0]];
    let refs: Vec<&[f32]> = x.iter().map(|v| v.as_slice()).collect();
    let labels = [0, 1, 1, 0];
    let m = svm_train(&refs, &labels, 2, &SvmParams::default()).unwrap();
    let p = m.predict(&x[0]).unwrap();
    // the shared point is wrong for exactly one of its two labels
    assert_eq!([labels[0] != p, labels[1] != p].iter().filter(|&&e| e).count(), 1);
}

#[test]
fn svm_argmax_unchanged_by_positive_weight_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x: Vec<Vec<f32>> = (0..60).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let refs: Vec<&[f32]> = x.iter().map(|v| v.as_slice()).collect();
    let m = svm_train(&refs, &labels, 3, &SvmParams::default()).unwrap();
    let mut scaled = m.clone();
    scaled.weights.iter_mut().chain(scaled.biases.iter_mut()).for_each(|v| *v *= 7.5);
    for v in &x {
        assert_eq!(m.predict(v).unwrap(), scaled.predict(v).unwrap());
    }
}
