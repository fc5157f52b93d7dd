//! HDBSCAN: mutual-reachability MST, single-linkage hierarchy, condensed
//! tree and excess-of-mass cluster selection.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use super::topology::{prim, UnionFind};
use super::ClusterAssignment;
use crate::linalg::pairwise_distances;

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 10;

/// Internal dendrogram node: two children and the merge height.
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    height: f64,
    size: usize,
}

fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    // stable sort keeps Prim order on equal weights
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut uf = UnionFind::new(n);
    let mut node_of_root: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (a, b, w) in edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        let (left, right) = (node_of_root[ra], node_of_root[rb]);
        let id = n + merges.len();
        size[id] = size[left] + size[right];
        merges.push(Merge { left, right, height: w, size: size[id] });
        uf.union(ra, rb);
        let root = uf.find(ra);
        node_of_root[root] = id;
    }
    merges
}

#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    /// point index or cluster id, per `is_cluster`
    child: usize,
    is_cluster: bool,
    lambda: f64,
    size: usize,
}

fn lambda_of(height: f64) -> f64 {
    1.0 / height.max(1e-300)
}

fn leaves(n: usize, merges: &[Merge], node: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(v) = stack.pop() {
        if v < n {
            out.push(v);
        } else {
            let m = merges[v - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
}

/// Condensed tree; cluster 0 is the root, ids grow top-down.
fn condense(n: usize, merges: &[Merge], min_size: usize) -> (Vec<CondensedEdge>, usize) {
    let node_size = |v: usize| if v < n { 1 } else { merges[v - n].size };
    let root = n + merges.len() - 1;
    let mut out = Vec::new();
    let mut next_cluster = 1;
    let mut queue = VecDeque::from([(root, 0usize)]);
    let mut fallen = Vec::new();
    while let Some((node, cluster)) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.height);
        let (ls, rs) = (node_size(m.left), node_size(m.right));
        let mut drop_points = |child: usize, out: &mut Vec<CondensedEdge>| {
            fallen.clear();
            leaves(n, merges, child, &mut fallen);
            for &p in fallen.iter() {
                out.push(CondensedEdge { parent: cluster, child: p, is_cluster: false, lambda, size: 1 });
            }
        };
        match (ls >= min_size, rs >= min_size) {
            (true, true) => {
                for (child, size) in [(m.left, ls), (m.right, rs)] {
                    let id = next_cluster;
                    next_cluster += 1;
                    out.push(CondensedEdge { parent: cluster, child: id, is_cluster: true, lambda, size });
                    queue.push_back((child, id));
                }
            }
            (false, false) => {
                drop_points(m.left, &mut out);
                drop_points(m.right, &mut out);
            }
            (true, false) => {
                drop_points(m.right, &mut out);
                queue.push_back((m.left, cluster));
            }
            (false, true) => {
                drop_points(m.left, &mut out);
                queue.push_back((m.right, cluster));
            }
        }
    }
    (out, next_cluster)
}

/// Excess-of-mass selection (the root is never selected).
fn select(tree: &[CondensedEdge], n_clusters: usize) -> Vec<bool> {
    let mut birth = vec![0.0; n_clusters];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for e in tree.iter().filter(|e| e.is_cluster) {
        birth[e.child] = e.lambda;
        children[e.parent].push(e.child);
    }
    let mut stability = vec![0.0; n_clusters];
    for e in tree {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }
    let mut selected = vec![false; n_clusters];
    for c in (1..n_clusters).rev() {
        let child_sum: f64 = children[c].iter().map(|&k| stability[k]).sum();
        if !children[c].is_empty() && child_sum > stability[c] {
            stability[c] = child_sum;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&children[k]);
            }
        }
    }
    selected
}

/// Clusters the rows of `points`; `min_samples = min_cluster_size`.
///
/// Core distance counts the point itself as its first neighbour. Fewer
/// points than `min_cluster_size` (or a hierarchy with no stable split)
/// gives all noise. Sizes below 2 are treated as 2.
pub fn hdbscan(points: &DMatrix<f64>, min_cluster_size: usize) -> ClusterAssignment {
    let n = points.nrows();
    let mcs = min_cluster_size.max(2);
    if n < mcs {
        return ClusterAssignment::canonical(&vec![-1; n]);
    }
    let dist = pairwise_distances(points);
    let core: Vec<f64> = crate::par::map_range(n, |i| {
        let mut row: Vec<f64> = dist.column(i).iter().copied().collect();
        row.sort_by(f64::total_cmp);
        row[mcs - 1]
    });
    let mst = prim(n, |i, j| dist[(i, j)].max(core[i]).max(core[j]));
    let merges = single_linkage(n, mst);
    let (tree, n_clusters) = condense(n, &merges, mcs);
    let selected = select(&tree, n_clusters);

    let mut cluster_parent = vec![usize::MAX; n_clusters];
    for e in tree.iter().filter(|e| e.is_cluster) {
        cluster_parent[e.child] = e.parent;
    }
    let mut raw = vec![-1i64; n];
    for e in tree.iter().filter(|e| !e.is_cluster) {
        let mut c = e.parent;
        loop {
            if selected[c] {
                raw[e.child] = c as i64;
                break;
            }
            if c == 0 {
                break;
            }
            c = cluster_parent[c];
        }
    }
    ClusterAssignment::canonical(&raw)
}
