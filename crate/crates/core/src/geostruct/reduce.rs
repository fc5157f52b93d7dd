use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GeoError, PointCloud};
use crate::linalg::{center_columns, pairwise_distances, sym_eigen_desc};
use crate::seed::{derive_seed, rng_from_seed};

pub const DEFAULT_TARGET_DIM: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Pca,
    /// UMAP-style neighbour-graph embedding.
    #[serde(alias = "neighbor_embedding")]
    Neighbor,
}

/// Per-coordinate z-score (population std; constant coordinates become 0),
/// then every non-zero row scaled to unit length.
pub fn standardize(p: &PointCloud) -> Result<PointCloud, GeoError> {
    let n = p.len();
    if n < 2 {
        return Err(GeoError::TooFewPoints { needed: 2, got: n });
    }
    let mut z = p.points().clone();
    for mut col in z.column_iter_mut() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            col.fill(0.0);
            continue;
        }
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        col.apply(|v| *v = (*v - mean) / sd);
    }
    for mut row in z.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row.unscale_mut(norm);
        }
    }
    Ok(p.with_points(z))
}

fn eig_err() -> GeoError {
    GeoError::NumericalFailure("eigendecomposition did not converge".into())
}

/// Projection onto the top `target_dim` principal axes.
///
/// Axes come from whichever of the `N × N` Gram matrix or the `d × d`
/// scatter matrix is smaller. Each axis is oriented so that its
/// largest-magnitude loading (lowest index on ties) is positive.
pub fn pca(p: &PointCloud, target_dim: usize) -> Result<PointCloud, GeoError> {
    let (n, d) = (p.len(), p.dim());
    if target_dim == 0 || target_dim > d {
        return Err(GeoError::TargetTooLarge { target: target_dim, limit: d });
    }
    if n <= target_dim {
        return Err(GeoError::TargetTooLarge { target: target_dim, limit: n.saturating_sub(1) });
    }
    let x = center_columns(p.points());
    let mut axes = DMatrix::zeros(d, target_dim);
    if n < d {
        let gram = &x * x.transpose();
        let (values, vectors) = sym_eigen_desc(&gram).ok_or_else(eig_err)?;
        let xt = x.transpose();
        for j in 0..target_dim {
            let s = values[j].max(0.0).sqrt();
            if s > 0.0 {
                let v = &xt * vectors.column(j) / s;
                axes.set_column(j, &v);
            }
        }
        // zero-variance directions: any unit vector orthogonal to the data
        // projects to 0; leave the column at zero so the projection is 0 too
    } else {
        let scatter = x.transpose() * &x;
        let (_, vectors) = sym_eigen_desc(&scatter).ok_or_else(eig_err)?;
        axes.copy_from(&vectors.columns(0, target_dim));
    }
    for mut col in axes.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(p.with_points(x * axes))
}

/// Knobs for [`neighbor_embedding`]. `a`, `b` are the curve parameters for
/// a minimum distance of 0.1 and spread 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborParams {
    pub n_neighbors: usize,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub a: f64,
    pub b: f64,
    pub seed: u64,
}

impl Default for NeighborParams {
    fn default() -> Self {
        Self { n_neighbors: 15, n_epochs: 200, negative_sample_rate: 5, a: 1.577, b: 0.8951, seed: 0 }
    }
}

fn smooth_knn(dists: &[(f64, usize)]) -> (f64, f64) {
    let k = dists.len();
    let target = (k as f64).log2();
    let rho = dists.iter().map(|d| d.0).find(|&d| d > 0.0).unwrap_or(0.0);
    let mean: f64 = dists.iter().map(|d| d.0).sum::<f64>() / k as f64;
    let (mut lo, mut hi, mut mid) = (0.0_f64, f64::INFINITY, 1.0_f64);
    for _ in 0..64 {
        let psum: f64 = dists.iter().map(|&(d, _)| (-(d - rho).max(0.0) / mid).exp()).sum();
        if (psum - target).abs() < 1e-5 {
            break;
        }
        if psum > target {
            hi = mid;
            mid = 0.5 * (lo + hi);
        } else {
            lo = mid;
            mid = if hi.is_finite() { 0.5 * (lo + hi) } else { mid * 2.0 };
        }
    }
    (rho, mid.max(1e-3 * mean))
}

/// Fuzzy-union k-NN graph: `w = a + b − ab` over both edge directions.
fn fuzzy_graph(points: &DMatrix<f64>, k: usize) -> BTreeMap<(usize, usize), f64> {
    let n = points.nrows();
    let dist = pairwise_distances(points);
    let directed: Vec<Vec<(usize, f64)>> = crate::par::map_range(n, |i| {
        let mut row: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist[(i, j)], j)).collect();
        row.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        row.truncate(k);
        let (rho, sigma) = smooth_knn(&row);
        row.iter().map(|&(d, j)| (j, (-(d - rho).max(0.0) / sigma).exp())).collect()
    });
    let mut graph = BTreeMap::new();
    for (i, row) in directed.iter().enumerate() {
        for &(j, w) in row {
            let key = (i.min(j), i.max(j));
            graph.entry(key).and_modify(|old: &mut f64| *old = *old + w - *old * w).or_insert(w);
        }
    }
    graph
}

fn spectral_init(n: usize, graph: &BTreeMap<(usize, usize), f64>, dim: usize) -> Result<DMatrix<f64>, GeoError> {
    let mut degree = vec![0.0; n];
    for (&(i, j), &w) in graph {
        degree[i] += w;
        degree[j] += w;
    }
    // top eigenvectors of D^{-1/2} W D^{-1/2} = bottom of the normalised Laplacian
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), &w) in graph {
        let v = w / (degree[i] * degree[j]).sqrt();
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    let (_, vectors) = sym_eigen_desc(&m).ok_or_else(eig_err)?;
    let mut y = DMatrix::from_fn(n, dim, |r, c| vectors[(r, c + 1)]);
    for mut col in y.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
    let max = y.amax();
    if max > 0.0 {
        y *= 10.0 / max;
    }
    Ok(y)
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// UMAP-like layout: k-NN fuzzy graph, spectral initialisation, then
/// cross-entropy SGD with negative sampling. Fully sequential so the result
/// depends only on the input and `params.seed`.
pub fn neighbor_embedding(p: &PointCloud, target_dim: usize, params: &NeighborParams) -> Result<PointCloud, GeoError> {
    let (n, d) = (p.len(), p.dim());
    if target_dim == 0 || target_dim > d {
        return Err(GeoError::TargetTooLarge { target: target_dim, limit: d });
    }
    if n < target_dim + 2 {
        return Err(GeoError::TooFewPoints { needed: target_dim + 2, got: n });
    }
    if params.n_neighbors == 0 || params.n_epochs == 0 {
        return Err(GeoError::InvalidParameter("n_neighbors and n_epochs must be positive".into()));
    }
    let k = params.n_neighbors.min(n - 1);
    let graph = fuzzy_graph(p.points(), k);
    let mut y = spectral_init(n, &graph, target_dim)?;

    let w_max = graph.values().copied().fold(0.0, f64::max);
    let epochs = params.n_epochs as f64;
    let edges: Vec<(usize, usize, f64)> = graph
        .iter()
        .filter(|(_, &w)| w >= w_max / epochs)
        .flat_map(|(&(i, j), &w)| [(i, j, w_max / w), (j, i, w_max / w)])
        .collect();
    let mut next_sample: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let neg_every: Vec<f64> = edges.iter().map(|e| e.2 / params.negative_sample_rate.max(1) as f64).collect();
    let mut next_neg = neg_every.clone();

    let (a, b) = (params.a, params.b);
    let mut rng = rng_from_seed(derive_seed(params.seed, &["neighbor_embedding".into()]));
    let mut delta = vec![0.0; target_dim];
    for epoch in 0..params.n_epochs {
        let lr = 1.0 - epoch as f64 / epochs;
        let now = epoch as f64;
        for (e, &(i, j, every)) in edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let d2: f64 = (0..target_dim).map(|c| (y[(i, c)] - y[(j, c)]).powi(2)).sum();
            let coeff = if d2 > 0.0 { -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b)) } else { 0.0 };
            for c in 0..target_dim {
                delta[c] = clip(coeff * (y[(i, c)] - y[(j, c)])) * lr;
            }
            for c in 0..target_dim {
                y[(i, c)] += delta[c];
                y[(j, c)] -= delta[c];
            }
            next_sample[e] += every;

            let n_neg = ((now - next_neg[e]) / neg_every[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let m = rng.random_range(0..n);
                if m == i {
                    continue;
                }
                let d2: f64 = (0..target_dim).map(|c| (y[(i, c)] - y[(m, c)]).powi(2)).sum();
                let coeff = if d2 > 0.0 { 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b))) } else { 0.0 };
                for c in 0..target_dim {
                    let g = if coeff > 0.0 { clip(coeff * (y[(i, c)] - y[(m, c)])) } else { 4.0 };
                    y[(i, c)] += g * lr;
                }
            }
            next_neg[e] += n_neg as f64 * neg_every[e];
        }
    }
    Ok(p.with_points(y))
}

/// Reduces to `target_dim` with the chosen method; `seed` only affects the
/// neighbour embedding.
pub fn reduce(p: &PointCloud, target_dim: usize, method: Reduction, seed: u64) -> Result<PointCloud, GeoError> {
    match method {
        Reduction::Pca => pca(p, target_dim),
        Reduction::Neighbor => neighbor_embedding(p, target_dim, &NeighborParams { seed, ..Default::default() }),
    }
}
