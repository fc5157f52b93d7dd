//! Cluster-centre interventions on latent point clouds.
//!
//! Cluster centres are translated by random unit directions scaled by a
//! step `α`; every member follows its centre, the translated latents are
//! decoded, and proposals are scored by a structural term (the
//! Gromov–Wasserstein distance between normalised distance matrices, or the
//! inverse of the average centre separation) plus weighted reconstruction
//! error. The best proposal is kept.

mod gw;
mod search;

use nalgebra::DMatrix;

pub use gw::{gw_distance, gw_distance_with, GwOptions, GwOutcome};
pub use search::{
    baseline_mse, case3_sweep, pearson, random_search_intervene, stratified_subsample, Case3Result, InterventionConfig,
    InterventionRecord, LossKind, DEFAULT_ALPHAS,
};

use crate::geostruct::ClusterAssignment;
use crate::linalg::pairwise_distances;

#[derive(Debug, thiserror::Error)]
pub enum InterveneError {
    #[error("no non-noise clusters")]
    NoClusters,
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Sae(#[from] crate::saecore::SaeError),
}

/// Symmetric distance matrix scaled so its largest entry is 1 (all zeros
/// when every point coincides).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    d: DMatrix<f64>,
}

impl MetricMatrix {
    /// Wraps an existing matrix after checking it is square, symmetric,
    /// zero on the diagonal and within `[0, 1]`.
    pub fn new(d: DMatrix<f64>) -> Result<Self, InterveneError> {
        if !d.is_square() {
            return Err(InterveneError::Invalid("distance matrix must be square".into()));
        }
        let n = d.nrows();
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(InterveneError::Invalid("distance matrix needs a zero diagonal".into()));
            }
            for j in 0..n {
                let v = d[(i, j)];
                if !(0.0..=1.0).contains(&v) || v != d[(j, i)] {
                    return Err(InterveneError::Invalid("entries must be symmetric and within [0, 1]".into()));
                }
            }
        }
        Ok(Self { d })
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.nrows() == 0
    }

    pub(crate) fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }
}

/// Euclidean distances between rows divided by the largest one.
pub fn normalized_distance_matrix(points: &DMatrix<f64>) -> Result<MetricMatrix, InterveneError> {
    if points.nrows() < 2 {
        return Err(InterveneError::TooFewPoints(points.nrows()));
    }
    let mut d = pairwise_distances(points);
    let max = d.max();
    if max > 0.0 {
        d /= max;
    }
    Ok(MetricMatrix { d })
}

/// Mean of the member rows of every cluster; noise rows are ignored.
pub fn cluster_centers(latents: &DMatrix<f64>, labels: &ClusterAssignment) -> Result<DMatrix<f64>, InterveneError> {
    if labels.len() != latents.nrows() {
        return Err(InterveneError::Invalid(format!("{} labels for {} latent rows", labels.len(), latents.nrows())));
    }
    if labels.k() == 0 {
        return Err(InterveneError::NoClusters);
    }
    Ok(crate::geostruct::centroids(latents, labels))
}

/// Average Euclidean distance over all pairs of centres.
pub fn aedp(centers: &DMatrix<f64>) -> Result<f64, InterveneError> {
    let k = centers.nrows();
    if k < 2 {
        return Err(InterveneError::TooFewClusters(k));
    }
    let d = pairwise_distances(centers);
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += d[(i, j)];
        }
    }
    Ok(2.0 * sum / (k * (k - 1)) as f64)
}

/// Objective of one proposal: `structural + λ·mse`, where the structural
/// term is `d_GW(d0, d1)` or `1 / aedp(centers)` depending on `kind`.
pub fn loss(
    kind: LossKind,
    lambda_mse: f64,
    d0: &MetricMatrix,
    d1: &MetricMatrix,
    centers: &DMatrix<f64>,
    mse_value: f64,
) -> Result<f64, InterveneError> {
    let structural = match kind {
        LossKind::Gw => gw_distance(d0, d1)?.distance,
        LossKind::InvAedp => 1.0 / aedp(centers)?,
    };
    Ok(structural + lambda_mse * mse_value)
}
