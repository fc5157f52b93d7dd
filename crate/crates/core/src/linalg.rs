//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

const MAX_EIGEN_ITERS: usize = 10_000;

/// Eigenvalues (descending) and matching eigenvectors (as columns) of a
/// symmetric matrix. Only the lower triangle is read. `None` when the QR
/// iteration does not converge.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> Option<(Vec<f64>, DMatrix<f64>)> {
    assert!(m.is_square(), "sym_eigen_desc needs a square matrix");
    let n = m.nrows();
    if n == 0 {
        return Some((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, MAX_EIGEN_ITERS)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Some((values, vectors))
}

/// Principal square root of a symmetric positive semidefinite matrix;
/// negative round-off eigenvalues are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_desc(m)?;
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    Some(symmetrize(&(scaled * vectors.transpose())))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Euclidean distance between rows `i` of `a` and `j` of `b`.
#[inline]
pub fn row_distance(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        s += d * d;
    }
    s.sqrt()
}

/// Full pairwise Euclidean distance matrix between the rows of `points`.
pub fn pairwise_distances(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    // row-major copy keeps the inner loop contiguous
    let d = points.ncols();
    let rows: Vec<f64> = (0..n).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| points[(r, c)]).collect();
    let upper = crate::par::map_range(n, |i| {
        let ri = &rows[i * d..(i + 1) * d];
        ((i + 1)..n)
            .map(|j| {
                let rj = &rows[j * d..(j + 1) * d];
                ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .collect::<Vec<f64>>()
    });
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + 1 + k;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Column means of `m`.
pub fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    (0..m.ncols()).map(|c| m.column(c).sum() / n).collect()
}

/// `m` with its column means subtracted.
pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] - means[c])
}
