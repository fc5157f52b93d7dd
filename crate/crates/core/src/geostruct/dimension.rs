use nalgebra::DMatrix;

use super::GeoError;
use crate::linalg::{center_columns, pairwise_distances, sym_eigen_desc};

pub const DEFAULT_TAU_DIM: f64 = 0.01;

/// Maximum-likelihood TwoNN estimate `N_valid / Σ ln(r₂/r₁)`.
///
/// `r₁`, `r₂` are each point's first and second nearest-neighbour
/// distances; points with `r₁ = 0` (exact duplicates) are skipped.
pub fn twonn_id(points: &DMatrix<f64>) -> Result<f64, GeoError> {
    let n = points.nrows();
    if n < 3 {
        return Err(GeoError::TooFewPoints { needed: 3, got: n });
    }
    let d = pairwise_distances(points);
    let logs: Vec<Option<f64>> = crate::par::map_range(n, |i| {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = d[(i, j)];
            if v < r1 {
                r2 = r1;
                r1 = v;
            } else if v < r2 {
                r2 = v;
            }
        }
        (r1 > 0.0).then(|| (r2 / r1).ln())
    });
    let valid: Vec<f64> = logs.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(GeoError::AllDuplicates);
    }
    let sum: f64 = valid.iter().sum();
    if sum <= 0.0 {
        return Err(GeoError::DegenerateConfiguration("all neighbour-distance ratios equal 1"));
    }
    Ok(valid.len() as f64 / sum)
}

/// Number of covariance eigenvalues whose share of the total variance
/// exceeds `tau_dim`. A cloud with zero variance has dimension 0.
pub fn pca_id(points: &DMatrix<f64>, tau_dim: f64) -> Result<usize, GeoError> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(GeoError::TooFewPoints { needed: 2, got: n });
    }
    let x = center_columns(points);
    // the nonzero spectrum of XᵀX equals that of XXᵀ; use the smaller
    let m = if n < d { &x * x.transpose() } else { x.transpose() * &x };
    let (values, _) =
        sym_eigen_desc(&m).ok_or_else(|| GeoError::NumericalFailure("eigendecomposition did not converge".into()))?;
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Ok(0);
    }
    Ok(values.iter().filter(|&&v| v / total > tau_dim).count())
}
