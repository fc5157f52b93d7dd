//! Stratified-manifold analysis of latent tensors.
//!
//! A latent tensor `(batch, seq, d_sae)` is unfolded along each mode, each
//! unfolding `F` becomes a symmetric semipositive-definite Gram matrix
//! `S = FFᵀ + εI`, and the effective rank of every `S` gives the rank
//! triplet `(r1, r2, r3)`. The average Bures distance (AGD) between
//! feature-mode Gram matrices of token groups complements the ranks.

mod bures;
mod spectrum;
mod sweep;
mod unfold;

pub use bures::{agd, bures_distance, bures_distance_trace, AgdMetric};
pub use spectrum::{
    effective_rank, effective_rank_with, rank_triplet, spectrum, sspd, type7_quantile, QuantileDomain, RankTriplet,
    SspdMatrix, DEFAULT_EPSILON, EFFECTIVE_CUTOFF,
};
pub use sweep::{case1_sweep, encode_level, group_sspds, Case1Config, SweepRecord, MAX_AGD_GROUPS};
pub use unfold::{unfold, Mode};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StrataError {
    #[error("mode must be 1, 2 or 3, got {0}")]
    BadMode(usize),
    #[error("cannot build a Gram matrix from an empty unfolding")]
    EmptyMatrix,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}
