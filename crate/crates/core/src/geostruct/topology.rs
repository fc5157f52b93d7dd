use nalgebra::DMatrix;

use crate::linalg::pairwise_distances;

pub const DEFAULT_TAU_PERS: f64 = 0.1;

/// Disjoint sets with path halving and union by size.
pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; false if they were already joined.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Dense Prim over `n` vertices with edge weights `w(i, j)`.
///
/// Starts at vertex 0; ties pick the lowest vertex index. Returns the
/// `n − 1` tree edges `(parent, child, weight)` in insertion order.
pub(crate) fn prim(n: usize, w: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize, f64)> {
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = w(current, j);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
            if next == usize::MAX || best[j] < next_w {
                next = j;
                next_w = best[j];
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, best[next]));
        current = next;
    }
    edges
}

/// Euclidean minimum spanning tree over the rows of `points`.
pub fn mst_edges(points: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let d = pairwise_distances(points);
    prim(points.nrows(), |i, j| d[(i, j)])
}

/// Total edge length of a Euclidean minimum spanning tree (0 for one point).
pub fn mst_weight(centers: &DMatrix<f64>) -> f64 {
    mst_edges(centers).iter().map(|e| e.2).sum()
}

/// Zero-dimensional Vietoris–Rips barcode: death times of the `N − 1`
/// finite bars (ascending), followed by the essential bar as `+∞`.
/// Empty input gives an empty barcode.
pub fn h0_persistence(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows();
    if n == 0 {
        return Vec::new();
    }
    let d = pairwise_distances(points);
    let mut edges: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| (d[(i, j)], i, j)).collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut uf = UnionFind::new(n);
    let mut bars = Vec::with_capacity(n);
    for (w, i, j) in edges {
        if uf.union(i, j) {
            bars.push(w);
            if bars.len() == n - 1 {
                break;
            }
        }
    }
    bars.push(f64::INFINITY);
    bars
}

/// Number of zero-dimensional bars longer than `tau_pers` (the essential
/// bar always counts), i.e. the connected components of the Rips graph at
/// scale `tau_pers`.
pub fn betti0(points: &DMatrix<f64>, tau_pers: f64) -> usize {
    h0_persistence(points).into_iter().filter(|&b| b > tau_pers).count()
}
