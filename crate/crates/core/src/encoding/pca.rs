use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure, Error, Result};

/// Eigenvalues below this are reported as rank deficiency.
pub const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `dim_in × dim_out`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Set when any retained eigenvalue is below [`RANK_EPS`].
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn dim_in(&self) -> usize {
        self.mean.len()
    }

    pub fn dim_out(&self) -> usize {
        self.basis.ncols()
    }

    /// `basisᵀ·(x − mean)`.
    pub fn transform(&self, x: &[f32]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.dim_in(),
            Error::DimensionMismatch(format!("pca input {} != {}", x.len(), self.dim_in()))
        );
        let centered = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(&v, m)| v as f64 - m));
        Ok((self.basis.transpose() * centered).iter().copied().collect())
    }

    /// Transforms `rows` of `dim_in` values, returning `dim_out`-wide rows.
    pub fn transform_rows(&self, rows: &[f32]) -> Result<Vec<f64>> {
        let d = self.dim_in();
        ensure!(
            d > 0 && rows.len() % d == 0,
            Error::DimensionMismatch(format!("{} values is not a multiple of {d}", rows.len()))
        );
        let n = rows.len() / d;
        let x = DMatrix::from_fn(d, n, |i, j| rows[j * d + i] as f64 - self.mean[i]);
        let y = self.basis.transpose() * x;
        Ok(y.as_slice().to_vec())
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let r = &self.basis * DVector::from_column_slice(y);
        r.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }
}

/// Fits on `samples`, a row-major `n × dim` array.
pub fn pca_fit(samples: &[f32], dim: usize, d: usize) -> Result<PcaModel> {
    ensure!(
        dim > 0 && samples.len() % dim == 0,
        Error::DimensionMismatch(format!("{} values is not a multiple of {dim}", samples.len()))
    );
    ensure!(
        d >= 1 && d <= dim,
        Error::InvalidArgument(format!("pca output dim {d} must be in 1..={dim}"))
    );
    let n = samples.len() / dim;
    ensure!(n >= d, Error::TooFewSamples { needed: d, got: n });

    let mut mean = vec![0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| samples[i * dim + j] as f64 - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::zeros(dim, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for (c, &src) in order.iter().take(d).enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let lead = col.iter().enumerate().fold(0, |best, (i, v)| {
            if v.abs() > col[best].abs() {
                i
            } else {
                best
            }
        });
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        basis.set_column(c, &col);
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    let rank_deficient = eigenvalues.iter().any(|&e| e < RANK_EPS);
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_is_orthonormal_and_sign_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f32> = (0..400 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = pca_fit(&s, 6, 4).unwrap();
        let g = m.basis.transpose() * &m.basis;
        assert!((g - DMatrix::identity(4, 4)).amax() < 1e-10);
        for col in m.basis.column_iter() {
            let lead = col.iter().copied().fold(0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(pca_fit(&[0.0; 12], 3, 4).is_err());
        assert!(matches!(pca_fit(&[0.0; 6], 3, 3), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn flags_rank_deficiency() {
        // Every row is a multiple of (1, 2, 0): rank one.
        let s: Vec<f32> = (0..20).flat_map(|i| [i as f32, 2.0 * i as f32, 0.0]).collect();
        let m = pca_fit(&s, 3, 2).unwrap();
        assert!(m.rank_deficient);
        assert!(!pca_fit(&s, 3, 1).unwrap().rank_deficient);
    }
}
