use nalgebra::{DMatrix, SVD};

use super::GeoError;
use crate::linalg::center_columns;

/// Residual of the best orthogonal alignment of `b` onto `a`, after
/// removing both centroids, as a fraction of `‖a − ā‖²_F`.
///
/// Reflections are allowed and no scaling is applied, so the value is 0
/// exactly when `b` is a rigid motion of `a`.
pub fn procrustes_disparity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, GeoError> {
    if a.shape() != b.shape() {
        return Err(GeoError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.nrows() < 2 {
        return Err(GeoError::TooFewPoints { needed: 2, got: a.nrows() });
    }
    let ac = center_columns(a);
    let bc = center_columns(b);
    let scale = ac.norm_squared();
    if scale == 0.0 {
        return Err(GeoError::DegenerateConfiguration("reference points are all identical"));
    }
    // min over orthogonal R of ‖a − bR‖² = ‖a‖² + ‖b‖² − 2‖bᵀa‖_*; the
    // singular values stay well defined when bᵀa is rank deficient
    let sv = SVD::try_new(bc.transpose() * &ac, false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| GeoError::NumericalFailure("SVD did not converge".into()))?
        .singular_values;
    let residual = ac.norm_squared() + bc.norm_squared() - 2.0 * sv.sum();
    Ok(residual.max(0.0) / scale)
}

/// Greedy one-to-one matching of the rows of `a` and `b`.
///
/// Each set is centred and scaled to unit Frobenius norm (a zero set is
/// left centred); then pairs are taken in order of increasing distance,
/// ties by `(i, j)`, skipping rows already used. Returns
/// `min(rows(a), rows(b))` pairs sorted by `i`.
pub fn match_centroids(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<(usize, usize)>, GeoError> {
    if a.ncols() != b.ncols() {
        return Err(GeoError::ShapeMismatch(a.shape(), b.shape()));
    }
    let normalise = |m: &DMatrix<f64>| {
        let mut c = center_columns(m);
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
        c
    };
    let (na, nb) = (normalise(a), normalise(b));
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(a.nrows() * b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            pairs.push(((na.row(i) - nb.row(j)).norm(), i, j));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.nrows()], vec![false; b.nrows()]);
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    Ok(out)
}
