use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use super::spectrum::SspdMatrix;
use super::StrataError;
use crate::linalg::{psd_sqrt, sym_eigen_desc, symmetrize};

const SVD_MAX_ITERS: usize = 10_000;

/// Pairwise distance used by [`agd`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgdMetric {
    /// Bures–Wasserstein geodesic distance.
    #[default]
    Bures,
    /// Frobenius norm of the difference.
    Frobenius,
}

fn sqrt_of(s: &SspdMatrix) -> Result<DMatrix<f64>, StrataError> {
    psd_sqrt(s.data()).ok_or_else(|| StrataError::NumericalFailure("matrix square root did not converge".into()))
}

fn check_dims(a: &SspdMatrix, b: &SspdMatrix) -> Result<(), StrataError> {
    if a.dim() != b.dim() {
        return Err(StrataError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Bures distance from precomputed principal square roots.
///
/// `d² = tr A + tr B − 2‖A^{1/2}B^{1/2}‖_*` equals
/// `min_Q ‖A^{1/2} − B^{1/2}Q‖_F²` over orthogonal `Q`, attained at the polar
/// factor of `A^{1/2}B^{1/2}`. Evaluating the Frobenius residual directly
/// avoids the cancellation of the trace form for nearby matrices.
fn bures_from_roots(ra: &DMatrix<f64>, rb: &DMatrix<f64>) -> Result<f64, StrataError> {
    let cross = ra * rb;
    let svd = SVD::try_new(cross, true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| StrataError::NumericalFailure("SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let q = v_t.transpose() * u.transpose();
    Ok((ra - rb * q).norm())
}

/// Bures–Wasserstein distance between two SSPD matrices.
pub fn bures_distance(a: &SspdMatrix, b: &SspdMatrix) -> Result<f64, StrataError> {
    check_dims(a, b)?;
    bures_from_roots(&sqrt_of(a)?, &sqrt_of(b)?)
}

/// The same distance through the trace formula
/// `sqrt(max(0, tr A + tr B − 2 tr((A^{1/2} B A^{1/2})^{1/2})))`.
/// Loses roughly half the significant digits when `A ≈ B`.
pub fn bures_distance_trace(a: &SspdMatrix, b: &SspdMatrix) -> Result<f64, StrataError> {
    check_dims(a, b)?;
    let ra = sqrt_of(a)?;
    let inner = symmetrize(&(&ra * b.data() * &ra));
    let (values, _) = sym_eigen_desc(&inner)
        .ok_or_else(|| StrataError::NumericalFailure("eigendecomposition did not converge".into()))?;
    let fidelity: f64 = values.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((a.data().trace() + b.data().trace() - 2.0 * fidelity).max(0.0).sqrt())
}

/// Mean pairwise distance over all `N(N−1)/2` sample pairs.
pub fn agd(samples: &[SspdMatrix], metric: AgdMetric) -> Result<f64, StrataError> {
    let n = samples.len();
    if n < 2 {
        return Err(StrataError::TooFewSamples(n));
    }
    for s in &samples[1..] {
        check_dims(&samples[0], s)?;
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let distances: Vec<Result<f64, StrataError>> = match metric {
        AgdMetric::Frobenius => {
            crate::par::map_slice(&pairs, |&(i, j)| Ok((samples[i].data() - samples[j].data()).norm()))
        }
        AgdMetric::Bures => {
            // TODO: exploit the low-rank-plus-ridge structure of group Gram
            // matrices so large d_sae does not need dense square roots.
            let roots: Vec<Result<DMatrix<f64>, StrataError>> = crate::par::map_slice(samples, sqrt_of);
            let roots = roots.into_iter().collect::<Result<Vec<_>, _>>()?;
            crate::par::map_slice(&pairs, |&(i, j)| bures_from_roots(&roots[i], &roots[j]))
        }
    };
    let mut total = 0.0;
    for d in distances {
        total += d?;
    }
    Ok(total / pairs.len() as f64)
}
