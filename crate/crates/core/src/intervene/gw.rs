//! Gromov–Wasserstein distance with absolute-difference loss, solved by
//! Frank–Wolfe (conditional gradient) from the product coupling.
//!
//! With `L(i,j,k,l) = |Da(i,k) − Db(j,l)|` the objective
//! `E(π) = Σ L π_ij π_kl` is quadratic, so writing `(Lπ)_ij = Σ_kl L π_kl`
//! the gradient is `2Lπ` and the exact line search along `P − π` only needs
//! `Lπ`, `LP` and three inner products. `Lπ` is kept up to date by the same
//! convex combination as `π`, and `LP` costs `O(n·m·nnz(P))` because the
//! linear-minimisation vertex `P` is sparse.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{InterveneError, MetricMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwOptions {
    pub max_iter: usize,
    /// Stop when the objective decreases by less than this.
    pub tol: f64,
    /// Largest side solved by exact min-cost flow when the problem is not a
    /// uniform square assignment.
    pub exact_max: usize,
    /// Entropic regularisation, relative to the largest cost, for larger
    /// non-assignment problems.
    pub entropic_reg: f64,
}

impl Default for GwOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-9, exact_max: 64, entropic_reg: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GwOutcome {
    /// Best objective value reached.
    pub distance: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the tolerance was met.
    pub converged: bool,
}

/// Sparse coupling: `(row, col, mass)`.
type Support = Vec<(usize, usize, f64)>;

/// `Lπ` for the product coupling `π = μνᵀ` in `O(n²m + m² log m)`.
///
/// For fixed `j`, `F_j(a) = Σ_l ν_l |a − Db(j,l)|` is piecewise linear in
/// `a`; sweeping all `Da` entries in sorted order against the sorted row of
/// `Db` evaluates it with running prefix sums.
fn product_gradient(da: &MetricMatrix, db: &MetricMatrix, mu: &[f64], nu: &[f64]) -> DMatrix<f64> {
    let (n, m) = (da.len(), db.len());
    let mut entries: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|i| (0..n).map(move |k| (i, k))).map(|(i, k)| (da.get(i, k), i, k)).collect();
    entries.sort_by(|x, y| x.0.total_cmp(&y.0));
    let columns = crate::par::map_range(m, |j| {
        let mut row: Vec<(f64, f64)> = (0..m).map(|l| (db.get(j, l), nu[l])).collect();
        row.sort_by(|x, y| x.0.total_cmp(&y.0));
        let total_w: f64 = row.iter().map(|r| r.1).sum();
        let total_s: f64 = row.iter().map(|r| r.0 * r.1).sum();
        let (mut p, mut wl, mut sl) = (0usize, 0.0, 0.0);
        let mut acc = vec![0.0; n];
        for &(a, i, k) in &entries {
            while p < m && row[p].0 <= a {
                wl += row[p].1;
                sl += row[p].0 * row[p].1;
                p += 1;
            }
            let f = a * wl - sl + (total_s - sl) - a * (total_w - wl);
            acc[i] += mu[k] * f;
        }
        acc
    });
    DMatrix::from_fn(n, m, |i, j| columns[j][i])
}

/// `LP` for a sparse coupling.
fn sparse_gradient(da: &MetricMatrix, db: &MetricMatrix, support: &Support) -> DMatrix<f64> {
    let (n, m) = (da.len(), db.len());
    let columns = crate::par::map_range(m, |j| {
        let mut acc = vec![0.0; n];
        for &(k, l, w) in support {
            let b = db.get(j, l);
            for (i, out) in acc.iter_mut().enumerate() {
                *out += w * (da.get(i, k) - b).abs();
            }
        }
        acc
    });
    DMatrix::from_fn(n, m, |i, j| columns[j][i])
}

fn dot_sparse(g: &DMatrix<f64>, support: &Support) -> f64 {
    support.iter().map(|&(i, j, w)| w * g[(i, j)]).sum()
}

/// Minimum-cost perfect assignment (shortest augmenting paths with
/// potentials). Returns `col[i]` for every row.
pub(crate) fn assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

/// Exact transport by successive shortest paths on the dense bipartite
/// residual graph (Dijkstra with potentials).
pub(crate) fn exact_transport(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64]) -> Result<Support, InterveneError> {
    let (n, m) = cost.shape();
    let v = n + m;
    let total: f64 = mu.iter().sum();
    let eps = 1e-14 * total.max(f64::MIN_POSITIVE);
    let mut supply = mu.to_vec();
    let mut demand = nu.to_vec();
    let mut flow = DMatrix::<f64>::zeros(n, m);
    let mut pot = vec![0.0; v];
    let max_rounds = 4 * (n + m) * (n + m) + 16;
    for _ in 0..max_rounds {
        if supply.iter().all(|&s| s <= eps) || demand.iter().all(|&d| d <= eps) {
            break;
        }
        let mut dist = vec![f64::INFINITY; v];
        let mut prev = vec![usize::MAX; v];
        let mut done = vec![false; v];
        for i in 0..n {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            for x in 0..v {
                if !done[x] && dist[x].is_finite() && (u == usize::MAX || dist[x] < dist[u]) {
                    u = x;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let w = n + j;
                    let rc = (cost[(u, j)] + pot[u] - pot[w]).max(0.0);
                    if dist[u] + rc < dist[w] {
                        dist[w] = dist[u] + rc;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[(i, j)] > eps {
                        let rc = (-cost[(i, j)] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let sink = (0..m)
            .filter(|&j| demand[j] > eps && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]).then(a.cmp(&b)));
        let Some(sink) = sink else {
            return Err(InterveneError::NumericalFailure("transport problem has no augmenting path".into()));
        };
        let cap = dist[n + sink];
        for x in 0..v {
            pot[x] += dist[x].min(cap);
        }
        // bottleneck along the path
        let mut amount = demand[sink];
        let mut x = n + sink;
        while prev[x] != usize::MAX {
            let p = prev[x];
            if p >= n {
                amount = amount.min(flow[(x, p - n)]);
            }
            x = p;
        }
        amount = amount.min(supply[x]);
        let start = x;
        let mut x = n + sink;
        while prev[x] != usize::MAX {
            let p = prev[x];
            if p < n {
                flow[(p, x - n)] += amount;
            } else {
                flow[(x, p - n)] -= amount;
            }
            x = p;
        }
        supply[start] -= amount;
        demand[sink] -= amount;
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if flow[(i, j)] > eps {
                out.push((i, j, flow[(i, j)]));
            }
        }
    }
    Ok(out)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn; the plan is returned with entries below `1e-12`
/// of its maximum dropped.
pub(crate) fn entropic_transport(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64], reg: f64) -> Support {
    let (n, m) = cost.shape();
    let eps = reg * cost.amax().max(f64::MIN_POSITIVE);
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..2000 {
        for i in 0..n {
            f[i] = eps * (log_mu[i] - log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / eps)));
        }
        let mut err = 0.0;
        for j in 0..m {
            let new = eps * (log_nu[j] - log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / eps)));
            err += (new - g[j]).abs();
            g[j] = new;
        }
        if err < 1e-12 {
            break;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());
    let floor = 1e-12 * plan.max();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if plan[(i, j)] > floor {
                out.push((i, j, plan[(i, j)]));
            }
        }
    }
    out
}

fn is_uniform(w: &[f64]) -> bool {
    w.iter().all(|&x| x == w[0])
}

fn linear_minimiser(cost: &DMatrix<f64>, mu: &[f64], nu: &[f64], opts: &GwOptions) -> Result<Support, InterveneError> {
    let (n, m) = cost.shape();
    if n == m && is_uniform(mu) && is_uniform(nu) && mu[0] == nu[0] {
        // a permutation is an optimal vertex of the uniform square polytope
        let col = assignment(cost);
        return Ok(col.into_iter().enumerate().map(|(i, j)| (i, j, mu[0])).collect());
    }
    if n.max(m) <= opts.exact_max {
        exact_transport(cost, mu, nu)
    } else {
        Ok(entropic_transport(cost, mu, nu, opts.entropic_reg))
    }
}

fn check_weights(w: &[f64], n: usize, name: &str) -> Result<(), InterveneError> {
    if w.len() != n {
        return Err(InterveneError::Invalid(format!("{name} has {} weights for {n} points", w.len())));
    }
    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(InterveneError::Invalid(format!("{name} weights must be positive and finite")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(InterveneError::Invalid(format!("{name} weights sum to {s}, not 1")));
    }
    Ok(())
}

/// GW distance with uniform marginals and default options.
pub fn gw_distance(da: &MetricMatrix, db: &MetricMatrix) -> Result<GwOutcome, InterveneError> {
    let mu = vec![1.0 / da.len() as f64; da.len()];
    let nu = vec![1.0 / db.len() as f64; db.len()];
    gw_distance_with(da, db, &mu, &nu, &GwOptions::default())
}

/// `min_π Σ |Da(i,k) − Db(j,l)| π_ij π_kl` over couplings of `mu` and `nu`
/// (a local minimum: Frank–Wolfe from `μνᵀ` on a non-convex objective).
pub fn gw_distance_with(
    da: &MetricMatrix,
    db: &MetricMatrix,
    mu: &[f64],
    nu: &[f64],
    opts: &GwOptions,
) -> Result<GwOutcome, InterveneError> {
    let (n, m) = (da.len(), db.len());
    if n == 0 || m == 0 {
        return Err(InterveneError::TooFewPoints(0));
    }
    check_weights(mu, n, "mu")?;
    check_weights(nu, m, "nu")?;
    let forward = solve(da, db, mu, nu, opts)?;
    if n == m {
        return Ok(forward);
    }
    // distinct shapes break the tie structure differently in each
    // orientation; keep the better local minimum so the value is symmetric
    let backward = solve(db, da, nu, mu, opts)?;
    Ok(if backward.distance < forward.distance { backward } else { forward })
}

fn solve(
    da: &MetricMatrix,
    db: &MetricMatrix,
    mu: &[f64],
    nu: &[f64],
    opts: &GwOptions,
) -> Result<GwOutcome, InterveneError> {
    let (n, m) = (da.len(), db.len());
    let mut pi = DMatrix::from_fn(n, m, |i, j| mu[i] * nu[j]);
    let mut lpi = product_gradient(da, db, mu, nu);
    let mut energy = lpi.dot(&pi);
    let mut best = energy;
    for it in 1..=opts.max_iter {
        if energy <= 0.0 {
            return Ok(GwOutcome { distance: 0.0, iterations: it - 1, converged: true });
        }
        let p = linear_minimiser(&lpi, mu, nu, opts)?;
        let lp = sparse_gradient(da, db, &p);
        let e_p = dot_sparse(&lp, &p);
        let cross = dot_sparse(&lpi, &p);
        // E(π + γ(P − π)) = E + bγ + aγ²
        let a = e_p - 2.0 * cross + energy;
        let b = 2.0 * (cross - energy);
        // best step on [0, 1]; the quadratic may be concave, so both the
        // vertex and the far endpoint are candidates (f(1) = E(P) exactly)
        let (mut gamma, mut f_best) = (0.0, energy);
        if a > 0.0 {
            let g = (-b / (2.0 * a)).clamp(0.0, 1.0);
            let f = energy + b * g + a * g * g;
            if f < f_best {
                (gamma, f_best) = (g, f);
            }
        }
        if e_p < f_best {
            gamma = 1.0;
        }
        if gamma == 0.0 {
            // no improving step towards the minimiser: stationary point
            return Ok(GwOutcome { distance: best.max(0.0), iterations: it, converged: true });
        }
        if gamma == 1.0 {
            pi = DMatrix::zeros(n, m);
            for &(i, j, w) in &p {
                pi[(i, j)] += w;
            }
            lpi = lp;
        } else {
            pi *= 1.0 - gamma;
            for &(i, j, w) in &p {
                pi[(i, j)] += gamma * w;
            }
            lpi = lpi * (1.0 - gamma) + lp * gamma;
        }
        let next = lpi.dot(&pi);
        let change = energy - next;
        energy = next;
        best = best.min(energy);
        if change.abs() < opts.tol {
            return Ok(GwOutcome { distance: best.max(0.0), iterations: it, converged: true });
        }
    }
    Ok(GwOutcome { distance: best.max(0.0), iterations: opts.max_iter, converged: false })
}

#[cfg(test)]
mod tests {
    use super::super::normalized_distance_matrix;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn metric(n: usize, seed: u64) -> MetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalized_distance_matrix(&cloud(n, 3, &mut rng)).unwrap()
    }

    fn permuted(d: &MetricMatrix, perm: &[usize]) -> MetricMatrix {
        let n = d.len();
        MetricMatrix::new(DMatrix::from_fn(n, n, |i, j| d.get(perm[i], perm[j]))).unwrap()
    }

    fn brute_gradient(da: &MetricMatrix, db: &MetricMatrix, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (da.len(), db.len());
        DMatrix::from_fn(n, m, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                for l in 0..m {
                    s += (da.get(i, k) - db.get(j, l)).abs() * pi[(k, l)];
                }
            }
            s
        })
    }

    #[test]
    fn product_gradient_matches_brute_force() {
        let (da, db) = (metric(7, 1), metric(5, 2));
        let mu = [0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1];
        let nu = [0.3, 0.1, 0.2, 0.2, 0.2];
        let pi = DMatrix::from_fn(7, 5, |i, j| mu[i] * nu[j]);
        assert_relative_eq!(product_gradient(&da, &db, &mu, &nu), brute_gradient(&da, &db, &pi), epsilon = 1e-14);
        let support: Support = vec![(0, 1, 0.5), (3, 4, 0.25), (6, 0, 0.25)];
        let mut sparse = DMatrix::zeros(7, 5);
        for &(i, j, w) in &support {
            sparse[(i, j)] = w;
        }
        assert_relative_eq!(sparse_gradient(&da, &db, &support), brute_gradient(&da, &db, &sparse), epsilon = 1e-14);
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in all_permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            let cost = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
            let got: f64 = assignment(&cost).iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
            let best = all_permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(got, best, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_transport_respects_marginals_and_matches_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cost = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0.0..1.0));
        let w = vec![0.2; 5];
        let plan = exact_transport(&cost, &w, &w).unwrap();
        let by_flow: f64 = plan.iter().map(|&(i, j, f)| f * cost[(i, j)]).sum();
        let by_assign: f64 = assignment(&cost).iter().enumerate().map(|(i, &j)| 0.2 * cost[(i, j)]).sum();
        assert_relative_eq!(by_flow, by_assign, epsilon = 1e-12);

        let cost = DMatrix::from_fn(4, 6, |_, _| rng.random_range(0.0..1.0));
        let (mu, nu) = (vec![0.25; 4], vec![1.0 / 6.0; 6]);
        let plan = exact_transport(&cost, &mu, &nu).unwrap();
        let mut rows = [0.0; 4];
        let mut cols = [0.0; 6];
        for &(i, j, f) in &plan {
            rows[i] += f;
            cols[j] += f;
        }
        rows.iter().for_each(|r| assert_relative_eq!(*r, 0.25, epsilon = 1e-12));
        cols.iter().for_each(|c| assert_relative_eq!(*c, 1.0 / 6.0, epsilon = 1e-12));
        // entropic plan is close in cost
        let ent = entropic_transport(&cost, &mu, &nu, 1e-3);
        let c_exact: f64 = plan.iter().map(|&(i, j, f)| f * cost[(i, j)]).sum();
        let c_ent: f64 = ent.iter().map(|&(i, j, f)| f * cost[(i, j)]).sum();
        assert!((c_exact - c_ent).abs() < 1e-2, "{c_exact} vs {c_ent}");
    }

    #[test]
    fn self_distance_is_zero() {
        for (n, seed) in [(2, 1), (10, 2), (40, 3)] {
            let d = metric(n, seed);
            let out = gw_distance(&d, &d).unwrap();
            assert!(out.distance <= 1e-8, "n={n} {out:?}");
        }
    }

    #[test]
    fn unequal_sizes_are_supported() {
        let (a, b) = (metric(8, 5), metric(11, 6));
        let ab = gw_distance(&a, &b).unwrap();
        assert!(ab.distance > 0.0 && ab.distance.is_finite());
        let big = gw_distance(&metric(70, 7), &metric(66, 8)).unwrap();
        assert!(big.distance > 0.0 && big.distance < 1.0);
    }

    #[test]
    fn rejects_bad_weights() {
        let d = metric(3, 9);
        let opts = GwOptions::default();
        assert!(gw_distance_with(&d, &d, &[0.5, 0.5], &[1.0 / 3.0; 3], &opts).is_err());
        assert!(gw_distance_with(&d, &d, &[0.5, 0.5, 0.5], &[1.0 / 3.0; 3], &opts).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_distance_vanishes(n in 2usize..=12, seed in any::<u64>()) {
            let d = metric(n, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let out = gw_distance(&d, &permuted(&d, &perm)).unwrap();
            prop_assert!(out.distance <= 1e-6, "{:?}", out);
        }

        #[test]
        fn symmetric_in_arguments(n in 2usize..=20, m in 2usize..=20, seed in any::<u64>()) {
            let (a, b) = (metric(n, seed), metric(m, seed.wrapping_add(1)));
            let ab = gw_distance(&a, &b).unwrap().distance;
            let ba = gw_distance(&b, &a).unwrap().distance;
            prop_assert!((ab - ba).abs() <= 1e-6, "{} vs {}", ab, ba);
        }
    }
}
