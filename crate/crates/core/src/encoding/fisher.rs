use serde::{Deserialize, Serialize};

use super::gmm::GmmModel;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f32>,
    /// Signed square root and L2 normalization applied.
    pub normalized: bool,
    /// Encoded from an empty descriptor set.
    pub empty: bool,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FisherOptions {
    /// Apply signed square root then L2 normalization.
    pub improved: bool,
}

impl Default for FisherOptions {
    fn default() -> Self {
        Self { improved: true }
    }
}

/// Encodes row-major `descriptors` (`n × dim`). Per mixture `k` the output
/// holds the mean block then the variance block:
///
/// ```text
/// u_k = 1/(n·√π_k)  · Σ γ_k(x) (x − μ_k)/σ_k
/// v_k = 1/(n·√2π_k) · Σ γ_k(x) [((x − μ_k)/σ_k)² − 1]
/// ```
pub fn fisher_encode(model: &GmmModel, descriptors: &[f64], opts: FisherOptions) -> Result<FisherVector> {
    let (k, d) = (model.k(), model.dim);
    ensure!(
        descriptors.len() % d == 0,
        Error::DimensionMismatch(format!("{} values is not a multiple of {d}", descriptors.len()))
    );
    let n = descriptors.len() / d;
    if n == 0 {
        return Ok(FisherVector {
            values: vec![0.0; 2 * k * d],
            normalized: opts.improved,
            empty: true,
        });
    }
    let norms = model.log_norms();
    let sigma: Vec<f64> = model.variances.iter().map(|v| v.sqrt()).collect();
    let mut acc = vec![0f64; 2 * k * d];
    let mut g = vec![0.0; k];
    for x in descriptors.chunks_exact(d) {
        model.posteriors_with(&norms, x, &mut g);
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let base = 2 * j * d;
            for i in 0..d {
                let z = (x[i] - model.means[j * d + i]) / sigma[j * d + i];
                acc[base + i] += gj * z;
                acc[base + d + i] += gj * (z * z - 1.0);
            }
        }
    }
    for j in 0..k {
        let pi = model.weights[j];
        let su = 1.0 / (n as f64 * pi.sqrt());
        let sv = 1.0 / (n as f64 * (2.0 * pi).sqrt());
        let base = 2 * j * d;
        acc[base..base + d].iter_mut().for_each(|v| *v *= su);
        acc[base + d..base + 2 * d].iter_mut().for_each(|v| *v *= sv);
    }
    if opts.improved {
        acc.iter_mut().for_each(|v| *v = v.signum() * v.abs().sqrt());
        l2_normalize(&mut acc);
    }
    Ok(FisherVector {
        values: acc.into_iter().map(|v| v as f32).collect(),
        normalized: opts.improved,
        empty: false,
    })
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Concatenates in the given order and re-applies L2 normalization.
pub fn fuse(fvs: &[FisherVector]) -> Result<FisherVector> {
    ensure!(!fvs.is_empty(), Error::InvalidArgument("nothing to fuse".into()));
    ensure!(fvs.iter().all(|f| f.normalized), Error::InconsistentNormalization);
    let mut v: Vec<f64> = fvs.iter().flat_map(|f| f.values.iter().map(|&x| x as f64)).collect();
    l2_normalize(&mut v);
    Ok(FisherVector {
        values: v.into_iter().map(|x| x as f32).collect(),
        normalized: true,
        empty: fvs.iter().all(|f| f.empty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_mixture(mean: Vec<f64>) -> GmmModel {
        let d = mean.len();
        GmmModel {
            dim: d,
            weights: vec![1.0],
            means: mean,
            variances: vec![1.0; d],
            variance_floor: 1e-4,
        }
    }

    #[test]
    fn descriptors_at_mean_give_zero_mean_block() {
        let m = one_mixture(vec![0.5, -1.0, 2.0]);
        let x: Vec<f64> = (0..10).flat_map(|_| m.means.clone()).collect();
        let fv = fisher_encode(&m, &x, FisherOptions { improved: false }).unwrap();
        assert!(fv.values[..3].iter().all(|v| v.abs() < 1e-6));
        let expect = -1.0 / 2f64.sqrt();
        assert!(fv.values[3..].iter().all(|&v| (v as f64 - expect).abs() < 1e-6));
    }

    #[test]
    fn empty_set_is_zero_and_flagged() {
        let fv = fisher_encode(&one_mixture(vec![0.0; 4]), &[], FisherOptions::default()).unwrap();
        assert!(fv.empty);
        assert_eq!(fv.values, vec![0.0; 8]);
    }

    #[test]
    fn fuse_two_and_one() {
        let a = FisherVector {
            values: vec![0.5; 4].into_iter().chain([0.0; 4]).collect(),
            normalized: true,
            empty: false,
        };
        let b = FisherVector {
            values: vec![0.25; 8],
            normalized: true,
            empty: false,
        };
        let f = fuse(&[a.clone(), b]).unwrap();
        assert_eq!(f.len(), 16);
        assert!((f.norm() - 1.0).abs() < 1e-6);
        assert_eq!(fuse(std::slice::from_ref(&a)).unwrap().values, a.values);
        let raw = FisherVector { normalized: false, ..a.clone() };
        assert!(matches!(fuse(&[a, raw]), Err(Error::InconsistentNormalization)));
    }
}
