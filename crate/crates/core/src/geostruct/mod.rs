//! Structure of residual and latent point clouds.
//!
//! Tokens are flattened into points, standardised, reduced, clustered with
//! HDBSCAN, and summarised per cluster (intrinsic dimension, zero-dimensional
//! persistence) and globally (MST weight of the cluster centres, Procrustes
//! disparity between the residual and latent centre sets).

mod dimension;
mod hdbscan;
mod procrustes;
mod reduce;
mod report;
mod topology;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use dimension::{pca_id, twonn_id, DEFAULT_TAU_DIM};
pub use hdbscan::{hdbscan, DEFAULT_MIN_CLUSTER_SIZE};
pub use procrustes::{match_centroids, procrustes_disparity};
pub use reduce::{neighbor_embedding, pca, reduce, standardize, NeighborParams, Reduction, DEFAULT_TARGET_DIM};
pub use report::{case2_report, Case2Config, Case2Report, CloudReport, ClusterStats, GlobalStats, LocalStats};
pub use topology::{betti0, h0_persistence, mst_edges, mst_weight, DEFAULT_TAU_PERS};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("target dimension {target} exceeds {limit}")]
    TargetTooLarge { target: usize, limit: usize },
    #[error("every point has a duplicate at distance zero")]
    AllDuplicates,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("point cloud contains NaN or infinite values")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

/// Where a point cloud came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Residual,
    Latent,
}

/// `N × d` points (one per row), all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: DMatrix<f64>,
    provenance: Provenance,
}

impl PointCloud {
    pub fn new(points: DMatrix<f64>, provenance: Provenance) -> Result<Self, GeoError> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(GeoError::TooFewPoints { needed: 1, got: points.nrows() });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        Ok(Self { points, provenance })
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_points(self) -> DMatrix<f64> {
        self.points
    }

    fn with_points(&self, points: DMatrix<f64>) -> Self {
        Self { points, provenance: self.provenance }
    }
}

/// Cluster labels, `-1` for noise, clusters numbered `0..k` in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<i64>,
    k: usize,
}

impl ClusterAssignment {
    /// Validates that labels are `-1` or in `0..k` and every cluster is
    /// non-empty.
    pub fn new(labels: Vec<i64>) -> Result<Self, GeoError> {
        let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let mut seen = vec![false; k];
        for &l in &labels {
            if l < -1 {
                return Err(GeoError::InvalidParameter(format!("label {l} below -1")));
            }
            if l >= 0 {
                seen[l as usize] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GeoError::InvalidParameter("cluster labels must be contiguous from 0".into()));
        }
        Ok(Self { labels, k })
    }

    /// Renumbers arbitrary labels (negative = noise) by first appearance.
    pub fn canonical(raw: &[i64]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                if l < 0 {
                    -1
                } else {
                    let next = map.len() as i64;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        Self { labels, k: map.len() }
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Number of non-noise clusters.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member indices of every cluster, in label order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

/// Rows of `points` listed in `idx`.
pub fn select_rows(points: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), points.ncols(), |r, c| points[(idx[r], c)])
}

/// Mean of each cluster's member rows (`k × d`); noise is ignored.
pub fn centroids(points: &DMatrix<f64>, labels: &ClusterAssignment) -> DMatrix<f64> {
    let d = points.ncols();
    let mut sums = DMatrix::zeros(labels.k(), d);
    let mut counts = vec![0usize; labels.k()];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l >= 0 {
            let l = l as usize;
            counts[l] += 1;
            for c in 0..d {
                sums[(l, c)] += points[(i, c)];
            }
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        sums.row_mut(l).unscale_mut(n as f64);
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_labels_follow_first_appearance() {
        let a = ClusterAssignment::canonical(&[7, -3, 2, 7, 2, 9]);
        assert_eq!(a.labels(), &[0, -1, 1, 0, 1, 2]);
        assert_eq!(a.k(), 3);
        assert_eq!(a.members(), vec![vec![0, 3], vec![2, 4], vec![5]]);
    }

    #[test]
    fn assignment_rejects_gaps() {
        assert!(ClusterAssignment::new(vec![0, 2]).is_err());
        assert!(ClusterAssignment::new(vec![-2]).is_err());
        assert_eq!(ClusterAssignment::new(vec![-1, -1]).unwrap().k(), 0);
    }

    #[test]
    fn point_cloud_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, f64::NAN]);
        assert_eq!(PointCloud::new(m, Provenance::Latent), Err(GeoError::NonFinite));
    }

    #[test]
    fn centroid_of_pair_is_midpoint() {
        let p = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 9.0, 9.0, 2.0, 2.0]);
        let labels = ClusterAssignment::new(vec![0, -1, 0]).unwrap();
        assert_eq!(centroids(&p, &labels), DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    }
}
