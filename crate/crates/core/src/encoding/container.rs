//! Versioned model container: magic `TDM1`, `u32` version, `u32` header
//! length, JSON header, `u64` value count, then little-endian `f32` values.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::fisher::FisherVector;
use super::gmm::GmmModel;
use super::pca::PcaModel;
use super::svm::LinearModel;
use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;

pub const MODEL_MAGIC: &[u8; 4] = b"TDM1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelHeader {
    Pca {
        dim_in: usize,
        dim_out: usize,
        rank_deficient: bool,
    },
    Gmm {
        k: usize,
        dim: usize,
        variance_floor: f64,
        log_likelihood: Vec<f64>,
    },
    Linear {
        classes: usize,
        dim: usize,
        c: f64,
    },
    /// A set of video-level vectors, one per id.
    Fisher {
        ids: Vec<String>,
        labels: Vec<usize>,
        dim: usize,
        normalized: bool,
        empty: Vec<bool>,
    },
}

pub fn encode_model(header: &ModelHeader, values: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("model header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * values.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], origin: &str) -> Result<(ModelHeader, Vec<f64>)> {
    ensure!(bytes.len() >= 12 && &bytes[..4] == MODEL_MAGIC, Error::BadMagic(origin.into()));
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    ensure!(
        version == MODEL_VERSION,
        Error::InvalidArgument(format!("{origin}: unsupported model version {version}"))
    );
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    let header_bytes = bytes
        .get(12..hend)
        .ok_or_else(|| Error::Truncated(format!("{origin}: header")))?;
    let header: ModelHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::json(origin, e))?;
    let count = bytes
        .get(hend..hend + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(format!("{origin}: count")))?;
    let count = usize::try_from(count).map_err(|_| Error::DimensionOverflow(origin.into()))?;
    let payload = count
        .checked_mul(4)
        .and_then(|n| bytes.get(hend + 8..hend + 8 + n))
        .ok_or_else(|| Error::Truncated(format!("{origin}: payload")))?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((header, values))
}

pub fn write_model(path: impl AsRef<Path>, header: &ModelHeader, values: &[f64]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(header, values))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(ModelHeader, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}

fn expect_len(values: &[f64], n: usize, what: &str) -> Result<()> {
    ensure!(
        values.len() == n,
        Error::DimensionMismatch(format!("{what}: expected {n} values, got {}", values.len()))
    );
    Ok(())
}

fn wrong_kind(want: &str) -> Error {
    Error::InvalidArgument(format!("container does not hold a {want} model"))
}

impl PcaModel {
    /// Payload: mean, basis (column-major), eigenvalues.
    pub fn to_container(&self) -> (ModelHeader, Vec<f64>) {
        let mut v = self.mean.clone();
        v.extend_from_slice(self.basis.as_slice());
        v.extend_from_slice(&self.eigenvalues);
        (
            ModelHeader::Pca {
                dim_in: self.dim_in(),
                dim_out: self.dim_out(),
                rank_deficient: self.rank_deficient,
            },
            v,
        )
    }

    pub fn from_container(h: &ModelHeader, v: &[f64]) -> Result<Self> {
        let ModelHeader::Pca {
            dim_in,
            dim_out,
            rank_deficient,
        } = *h
        else {
            return Err(wrong_kind("pca"));
        };
        expect_len(v, dim_in + dim_in * dim_out + dim_out, "pca")?;
        Ok(Self {
            mean: v[..dim_in].to_vec(),
            basis: DMatrix::from_column_slice(dim_in, dim_out, &v[dim_in..dim_in + dim_in * dim_out]),
            eigenvalues: v[dim_in + dim_in * dim_out..].to_vec(),
            rank_deficient,
        })
    }
}

impl GmmModel {
    /// Payload: weights, means, variances. `log_likelihood` is the fit history.
    pub fn to_container(&self, log_likelihood: &[f64]) -> (ModelHeader, Vec<f64>) {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.means);
        v.extend_from_slice(&self.variances);
        (
            ModelHeader::Gmm {
                k: self.k(),
                dim: self.dim,
                variance_floor: self.variance_floor,
                log_likelihood: log_likelihood.to_vec(),
            },
            v,
        )
    }

    /// Weights are renormalized after the `f32` round trip.
    pub fn from_container(h: &ModelHeader, v: &[f64]) -> Result<Self> {
        let ModelHeader::Gmm {
            k, dim, variance_floor, ..
        } = *h
        else {
            return Err(wrong_kind("gmm"));
        };
        expect_len(v, k + 2 * k * dim, "gmm")?;
        let mut weights = v[..k].to_vec();
        let total: f64 = weights.iter().sum();
        ensure!(total > 0.0, Error::InvalidArgument("gmm weights sum to zero".into()));
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            dim,
            weights,
            means: v[k..k + k * dim].to_vec(),
            variances: v[k + k * dim..].to_vec(),
            variance_floor,
        })
    }
}

impl LinearModel {
    /// Payload: weights (class-major), then biases.
    pub fn to_container(&self) -> (ModelHeader, Vec<f64>) {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.biases);
        (
            ModelHeader::Linear {
                classes: self.classes(),
                dim: self.dim,
                c: self.c,
            },
            v,
        )
    }

    pub fn from_container(h: &ModelHeader, v: &[f64]) -> Result<Self> {
        let ModelHeader::Linear { classes, dim, c } = *h else {
            return Err(wrong_kind("linear"));
        };
        expect_len(v, classes * dim + classes, "linear")?;
        Ok(Self {
            dim,
            weights: v[..classes * dim].to_vec(),
            biases: v[classes * dim..].to_vec(),
            c,
        })
    }
}

/// Video-level vectors with their ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub vectors: Vec<FisherVector>,
}

impl FisherSet {
    pub fn to_container(&self) -> Result<(ModelHeader, Vec<f64>)> {
        let dim = self.vectors.first().map_or(0, |v| v.len());
        ensure!(
            self.vectors.iter().all(|v| v.len() == dim),
            Error::DimensionMismatch("fisher vectors differ in length".into())
        );
        let normalized = self.vectors.iter().all(|v| v.normalized);
        ensure!(
            self.vectors.iter().all(|v| v.normalized == normalized),
            Error::InconsistentNormalization
        );
        let values = self
            .vectors
            .iter()
            .flat_map(|v| v.values.iter().map(|&x| x as f64))
            .collect();
        Ok((
            ModelHeader::Fisher {
                ids: self.ids.clone(),
                labels: self.labels.clone(),
                dim,
                normalized,
                empty: self.vectors.iter().map(|v| v.empty).collect(),
            },
            values,
        ))
    }

    pub fn from_container(h: &ModelHeader, v: &[f64]) -> Result<Self> {
        let ModelHeader::Fisher {
            ids,
            labels,
            dim,
            normalized,
            empty,
        } = h
        else {
            return Err(wrong_kind("fisher"));
        };
        ensure!(
            ids.len() == labels.len() && ids.len() == empty.len(),
            Error::DimensionMismatch("fisher header lists differ in length".into())
        );
        expect_len(v, ids.len() * dim, "fisher")?;
        let vectors = (0..ids.len())
            .map(|i| FisherVector {
                values: v[i * dim..(i + 1) * dim].iter().map(|&x| x as f32).collect(),
                normalized: *normalized,
                empty: empty[i],
            })
            .collect();
        Ok(Self {
            ids: ids.clone(),
            labels: labels.clone(),
            vectors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_round_trip() {
        let m = LinearModel {
            dim: 2,
            weights: vec![0.5, -1.25, 2.0, 0.0],
            biases: vec![0.125, -3.0],
            c: 100.0,
        };
        let (h, v) = m.to_container();
        let (h2, v2) = decode_model(&encode_model(&h, &v), "mem").unwrap();
        assert_eq!(LinearModel::from_container(&h2, &v2).unwrap(), m);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_model(b"TDM2....", "x"), Err(Error::BadMagic(_))));
        let (h, v) = LinearModel {
            dim: 1,
            weights: vec![1.0, 2.0],
            biases: vec![0.0, 0.0],
            c: 1.0,
        }
        .to_container();
        let bytes = encode_model(&h, &v);
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 2], "x"),
            Err(Error::Truncated(_))
        ));
        assert!(GmmModel::from_container(&h, &v).is_err());
    }
}
