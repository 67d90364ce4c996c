//! Descriptor sets to video-level vectors and a linear classifier.

pub mod container;
pub mod fisher;
pub mod gmm;
pub mod pca;
pub mod svm;

pub use container::{decode_model, encode_model, read_model, write_model, FisherSet, ModelHeader};
pub use fisher::{fisher_encode, fuse, FisherOptions, FisherVector};
pub use gmm::{gmm_fit, GmmFit, GmmModel, GmmParams};
pub use pca::{pca_fit, PcaModel};
pub use svm::{svm_train, LinearModel, SvmParams};
