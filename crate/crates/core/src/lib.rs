//! Geometry and topology analysis of sparse-autoencoder representations.
//!
//! The crate is organised around three analyses of how a sparse autoencoder
//! (SAE) reshapes language-model activations:
//!
//! * [`strata`]: rank triplets of mode-unfolding Gram matrices under
//!   feature-directed noise, plus average Bures distance between samples.
//! * [`geostruct`]: clustering, intrinsic dimension, zero-dimensional
//!   persistence, minimum-spanning-tree weight and Procrustes disparity of
//!   residual and latent point clouds.
//! * [`intervene`]: random-search translation of cluster centres scored by a
//!   Gromov-Wasserstein term (or inverse centre separation) plus
//!   reconstruction error.
//!
//! Tensors travel between tools in the single-file bundle format of
//! [`tensorio`]. Data-parallel loops use rayon when the `parallel` feature
//! is enabled (the default) and plain iterators otherwise.

pub mod geostruct;
pub mod intervene;
pub mod linalg;
mod par;
pub mod perturb;
pub mod saecore;
pub mod seed;
pub mod strata;
pub mod tensor;
pub mod tensorio;

pub use tensor::{ActivationTensor, LatentTensor, Tensor3};

/// Aggregate error for callers that drive several modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Bundle(#[from] tensorio::BundleError),
    #[error(transparent)]
    Sae(#[from] saecore::SaeError),
    #[error(transparent)]
    Perturb(#[from] perturb::PerturbError),
    #[error(transparent)]
    Strata(#[from] strata::StrataError),
    #[error(transparent)]
    Geo(#[from] geostruct::GeoError),
    #[error(transparent)]
    Intervene(#[from] intervene::InterveneError),
}

impl Error {
    /// True for failures of a numerical routine (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Strata(strata::StrataError::NumericalFailure(_))
                | Error::Geo(geostruct::GeoError::NumericalFailure(_))
                | Error::Intervene(intervene::InterveneError::NumericalFailure(_))
        )
    }
}
