//! Class-conditional mutual k-NN graphs with self-tuning Gaussian weights.
//!
//! Directed neighbor lists are computed on Euclidean distances, excluding the
//! point itself, with ties broken by ascending sample index. The bandwidth of
//! node `i` is its distance to the k-th entry of that list, and an edge
//! `(i, j)` carries weight `exp(-|z_i - z_j|^2 / (sigma_i sigma_j))`.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Bandwidth floor for duplicated points.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Dense symmetric matrix of Euclidean distances between rows.
pub fn pairwise_distances(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    let cols = points.transpose();
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        let zi = cols.column(i);
        for j in (i + 1)..n {
            let zj = cols.column(j);
            let d = zi
                .iter()
                .zip(zj.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    dist
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "mutual kNN needs at least 3 points, got {n}"
        )));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::InvalidInput(format!(
            "k={k} out of range for n={n} (need 1 <= k <= n-1)"
        )));
    }
    Ok(())
}

/// Tie-broken directed kNN lists, nearest first. `k = n - 1` is accepted
/// (every list holds all other points); the margin needs `k < n - 1`.
pub fn directed_knn(dist: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = dist.nrows();
    check_k(n, k)?;
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist[(i, a)].total_cmp(&dist[(i, b)]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect())
}

fn mutual_from_lists(lists: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let n = lists.len();
    let mut member = vec![false; n * n];
    for (i, l) in lists.iter().enumerate() {
        for &j in l {
            member[i * n + j] = true;
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if member[i * n + j] && member[j * n + i] {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Edges `(i, j)`, `i < j`, such that each endpoint is in the other's list.
pub fn mutual_knn(points: &DMatrix<f64>, k: usize) -> Result<Vec<(usize, usize)>> {
    let dist = pairwise_distances(points);
    Ok(mutual_from_lists(&directed_knn(&dist, k)?))
}

/// Directed kNN margin: the smallest gap, over all nodes, between the nearest
/// non-selected point and the farthest selected neighbor.
pub fn knn_margin(points: &DMatrix<f64>, k: usize) -> Result<f64> {
    let dist = pairwise_distances(points);
    knn_margin_from_distances(&dist, k)
}

pub fn knn_margin_from_distances(dist: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = dist.nrows();
    if k + 1 >= n {
        return Err(Error::InvalidInput(format!(
            "margin needs k < n-1 (k={k}, n={n})"
        )));
    }
    let lists = directed_knn(dist, k)?;
    let mut margin = f64::INFINITY;
    for (i, list) in lists.iter().enumerate() {
        let far_in = list.iter().map(|&j| dist[(i, j)]).fold(0.0, f64::max);
        let near_out = (0..n)
            .filter(|&l| l != i && !list.contains(&l))
            .map(|l| dist[(i, l)])
            .fold(f64::INFINITY, f64::min);
        margin = margin.min(near_out - far_in);
    }
    Ok(margin)
}

/// Weighted undirected graph for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGraph {
    pub class_id: usize,
    /// Original sample index of each node.
    pub node_ids: Vec<usize>,
    /// Undirected edges stored once, `i < j`, in node coordinates.
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    /// Euclidean embedding distance of each edge.
    pub lengths: Vec<f64>,
    pub degrees: Vec<f64>,
    pub k: usize,
    pub sigma: Vec<f64>,
}

impl ClassGraph {
    /// Builds a graph from explicit edges; degrees are derived.
    pub fn from_edges(
        class_id: usize,
        node_ids: Vec<usize>,
        edges: Vec<(usize, usize)>,
        weights: Vec<f64>,
        lengths: Vec<f64>,
        k: usize,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if weights.len() != edges.len() || lengths.len() != edges.len() {
            return Err(Error::InvalidInput("edge attribute length mismatch".into()));
        }
        let mut degrees = vec![0.0; n];
        for (&(i, j), &w) in edges.iter().zip(&weights) {
            if i >= j || j >= n {
                return Err(Error::InvalidInput(format!("bad edge ({i},{j}) for n={n}")));
            }
            if !(w > 0.0) {
                return Err(Error::InvalidInput(format!("non-positive weight {w}")));
            }
            degrees[i] += w;
            degrees[j] += w;
        }
        Ok(ClassGraph {
            class_id,
            node_ids,
            edges,
            weights,
            lengths,
            degrees,
            k,
            sigma,
        })
    }

    /// Unweighted graph with unit weights and lengths; handy for fixtures.
    pub fn unweighted(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let m = edges.len();
        Self::from_edges(0, (0..n).collect(), edges, vec![1.0; m], vec![1.0; m], 0, vec![1.0; n])
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Adjacency lists of `(neighbor, edge index)`, neighbors ascending.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            adj[i].push((j, e));
            adj[j].push((i, e));
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let n = self.num_nodes();
        let mut w = DMatrix::zeros(n, n);
        for (&(i, j), &x) in self.edges.iter().zip(&self.weights) {
            w[(i, j)] += x;
            w[(j, i)] += x;
        }
        w
    }

    /// `D - W`.
    pub fn combinatorial_laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.weight_matrix();
        for (v, &d) in self.degrees.iter().enumerate() {
            l[(v, v)] += d;
        }
        l
    }

    /// `I - D^{-1/2} W D^{-1/2}`; every node must have positive degree.
    pub fn normalized_laplacian(&self) -> Result<DMatrix<f64>> {
        if self.edges.is_empty() {
            return Err(Error::Edgeless);
        }
        if let Some(v) = self.degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "node {v} is isolated; drop isolated nodes first"
            )));
        }
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = self.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut l = DMatrix::identity(n, n);
        for (&(i, j), &w) in self.edges.iter().zip(&self.weights) {
            let x = w * inv_sqrt[i] * inv_sqrt[j];
            l[(i, j)] -= x;
            l[(j, i)] -= x;
        }
        Ok(l)
    }

    /// Drops nodes without incident edges; returns the compacted graph and the
    /// number of nodes removed.
    pub fn without_isolated(&self) -> (ClassGraph, usize) {
        let keep: Vec<usize> = (0..self.num_nodes())
            .filter(|&v| self.degrees[v] > 0.0)
            .collect();
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let g = ClassGraph {
            class_id: self.class_id,
            node_ids: keep.iter().map(|&v| self.node_ids[v]).collect(),
            edges: self.edges.iter().map(|&(i, j)| (remap[i], remap[j])).collect(),
            weights: self.weights.clone(),
            lengths: self.lengths.clone(),
            degrees: keep.iter().map(|&v| self.degrees[v]).collect(),
            k: self.k,
            sigma: keep.iter().map(|&v| self.sigma[v]).collect(),
        };
        (g, self.num_nodes() - keep.len())
    }

    /// Connected component label per node, labels in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut uf = UnionFind::new(n);
        for &(i, j) in &self.edges {
            uf.union(i, j);
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut out = vec![0; n];
        for v in 0..n {
            let r = uf.find(v);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            out[v] = label[r];
        }
        out
    }

    pub fn num_components(&self) -> usize {
        self.components().into_iter().max().map_or(0, |m| m + 1)
    }

    /// Induced subgraphs, one per connected component.
    pub fn split_components(&self) -> Vec<ClassGraph> {
        let comp = self.components();
        let count = comp.iter().copied().max().map_or(0, |m| m + 1);
        (0..count)
            .map(|c| {
                let nodes: Vec<usize> = (0..self.num_nodes()).filter(|&v| comp[v] == c).collect();
                let mut remap = vec![usize::MAX; self.num_nodes()];
                for (new, &old) in nodes.iter().enumerate() {
                    remap[old] = new;
                }
                let idx: Vec<usize> = (0..self.num_edges())
                    .filter(|&e| comp[self.edges[e].0] == c)
                    .collect();
                ClassGraph {
                    class_id: self.class_id,
                    node_ids: nodes.iter().map(|&v| self.node_ids[v]).collect(),
                    edges: idx
                        .iter()
                        .map(|&e| (remap[self.edges[e].0], remap[self.edges[e].1]))
                        .collect(),
                    weights: idx.iter().map(|&e| self.weights[e]).collect(),
                    lengths: idx.iter().map(|&e| self.lengths[e]).collect(),
                    degrees: nodes.iter().map(|&v| self.degrees[v]).collect(),
                    k: self.k,
                    sigma: nodes.iter().map(|&v| self.sigma[v]).collect(),
                }
            })
            .collect()
    }

    /// Debug dump as `src,dst,weight` using original sample indices.
    pub fn to_edge_csv(&self) -> String {
        let mut s = String::from("src,dst,weight\n");
        for (&(i, j), w) in self.edges.iter().zip(&self.weights) {
            writeln!(s, "{},{},{}", self.node_ids[i], self.node_ids[j], w).unwrap();
        }
        s
    }
}

/// Builds the weighted graph on `edges` with self-tuning bandwidths.
pub fn self_tuning_weights(
    points: &DMatrix<f64>,
    edges: &[(usize, usize)],
    k: usize,
) -> Result<ClassGraph> {
    let dist = pairwise_distances(points);
    let lists = directed_knn(&dist, k)?;
    weighted_graph(0, (0..points.nrows()).collect(), &dist, &lists, edges, k)
}

fn weighted_graph(
    class_id: usize,
    node_ids: Vec<usize>,
    dist: &DMatrix<f64>,
    lists: &[Vec<usize>],
    edges: &[(usize, usize)],
    k: usize,
) -> Result<ClassGraph> {
    let sigma: Vec<f64> = lists
        .iter()
        .enumerate()
        .map(|(i, l)| dist[(i, l[k - 1])].max(SIGMA_FLOOR))
        .collect();
    let lengths: Vec<f64> = edges.iter().map(|&(i, j)| dist[(i, j)]).collect();
    let weights: Vec<f64> = edges
        .iter()
        .zip(&lengths)
        .map(|(&(i, j), &d)| (-(d * d) / (sigma[i] * sigma[j])).exp())
        .collect();
    ClassGraph::from_edges(class_id, node_ids, edges.to_vec(), weights, lengths, k, sigma)
}

/// Mutual kNN graph with self-tuning weights for the rows of `points`.
pub fn build_class_graph(
    points: &DMatrix<f64>,
    k: usize,
    class_id: usize,
    node_ids: Vec<usize>,
) -> Result<ClassGraph> {
    let dist = pairwise_distances(points);
    build_class_graph_from_distances(&dist, k, class_id, node_ids)
}

pub fn build_class_graph_from_distances(
    dist: &DMatrix<f64>,
    k: usize,
    class_id: usize,
    node_ids: Vec<usize>,
) -> Result<ClassGraph> {
    let lists = directed_knn(dist, k)?;
    let edges = mutual_from_lists(&lists);
    weighted_graph(class_id, node_ids, dist, &lists, &edges, k)
}

/// Lipschitz constant of the self-tuning weights under pairwise distortion `eta`.
pub fn weight_lipschitz(max_edge_length: f64, eta: f64, sigma_min: f64) -> f64 {
    let d_eta = max_edge_length + eta;
    8.0 * d_eta / sigma_min.powi(2) + 16.0 * d_eta * d_eta / sigma_min.powi(3)
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when two distinct sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use nalgebra::SymmetricEigen;
    use rand_distr::{Distribution, StandardNormal};

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), 1, |i, _| xs[i])
    }

    fn random_cloud(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = Seed::new(seed).rng();
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_rotation(seed: u64, d: usize) -> DMatrix<f64> {
        let g = random_cloud(seed, d, d);
        g.qr().q()
    }

    #[test]
    fn collinear_tie_break() {
        let edges = mutual_knn(&line(&[0.0, 1.0, 2.0, 10.0]), 1).unwrap();
        assert_eq!(edges, vec![(0, 1)]);
    }

    #[test]
    fn equilateral_triangle_complete() {
        let s = 3f64.sqrt() / 2.0;
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, s]);
        assert_eq!(mutual_knn(&pts, 2).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(knn_margin(&pts, 2).is_err());
    }

    #[test]
    fn k_out_of_range() {
        assert!(mutual_knn(&line(&[0.0, 1.0]), 1).is_err());
        assert!(mutual_knn(&line(&[0.0, 1.0, 2.0, 3.0]), 0).is_err());
        assert!(mutual_knn(&line(&[0.0, 1.0, 2.0, 3.0]), 4).is_err());
    }

    #[test]
    fn rotation_preserves_edges() {
        for seed in 0..5 {
            let pts = random_cloud(seed, 30, 5);
            let q = random_rotation(seed + 100, 5);
            assert_eq!(mutual_knn(&pts, 4).unwrap(), mutual_knn(&(&pts * q), 4).unwrap());
        }
    }

    #[test]
    fn weight_closed_form() {
        // Two mutual neighbors at distance 2, with a third point far away.
        let pts = line(&[0.0, 2.0, 50.0]);
        let g = self_tuning_weights(&pts, &[(0, 1)], 1).unwrap();
        assert_eq!(g.sigma[0], 2.0);
        assert_eq!(g.sigma[1], 2.0);
        assert!((g.weights[0] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn duplicates_floor_sigma() {
        let pts = line(&[1.0, 1.0, 5.0, 9.0]);
        let g = build_class_graph(&pts, 1, 0, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(g.sigma[0], SIGMA_FLOOR);
        let e = g.edges.iter().position(|&e| e == (0, 1)).unwrap();
        assert_eq!(g.weights[e], 1.0);
        assert_eq!(knn_margin(&pts, 1).unwrap(), 0.0);
    }

    #[test]
    fn weights_in_unit_interval_and_degrees_consistent() {
        for seed in 0..100 {
            let pts = random_cloud(seed, 20, 3);
            let g = build_class_graph(&pts, 4, 0, (0..20).collect()).unwrap();
            assert!(g.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
            assert!(g.sigma.iter().all(|&s| s > 0.0));
            for v in 0..20 {
                let s: f64 = g
                    .edges
                    .iter()
                    .zip(&g.weights)
                    .filter(|(e, _)| e.0 == v || e.1 == v)
                    .map(|(_, w)| w)
                    .sum();
                assert!((s - g.degrees[v]).abs() <= 1e-12 * s.max(1.0));
            }
        }
    }

    #[test]
    fn normalized_laplacian_examples() {
        let k3 = ClassGraph::unweighted(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let eig = SymmetricEigen::new(k3.normalized_laplacian().unwrap()).eigenvalues;
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-12 && (e[1] - 1.5).abs() < 1e-12 && (e[2] - 1.5).abs() < 1e-12);

        let two = ClassGraph::unweighted(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
            .unwrap();
        let eig = SymmetricEigen::new(two.normalized_laplacian().unwrap()).eigenvalues;
        assert_eq!(eig.iter().filter(|x| x.abs() < 1e-10).count(), 2);

        let none = ClassGraph::unweighted(3, &[]).unwrap();
        assert!(matches!(none.normalized_laplacian(), Err(Error::Edgeless)));
    }

    #[test]
    fn random_normalized_laplacian_is_symmetric_psd() {
        for seed in 0..20 {
            let pts = random_cloud(seed, 25, 4);
            let (g, _) = build_class_graph(&pts, 5, 0, (0..25).collect())
                .unwrap()
                .without_isolated();
            let l = g.normalized_laplacian().unwrap();
            assert!((&l - l.transpose()).amax() <= 1e-14);
            let eig = SymmetricEigen::new(l).eigenvalues;
            assert!(eig.min() >= -1e-10 && eig.max() <= 2.0 + 1e-10);
            assert_eq!(eig.iter().filter(|x| x.abs() < 1e-10).count(), g.num_components());
        }
    }

    #[test]
    fn margin_line_example() {
        // Lists {0->1, 1->0, 2->1}; node gaps 2, 1, 1.
        assert_eq!(knn_margin(&line(&[0.0, 1.0, 3.0]), 1).unwrap(), 1.0);
        let pts = random_cloud(3, 15, 4);
        let q = random_rotation(9, 4);
        let a = knn_margin(&pts, 3).unwrap();
        let b = knn_margin(&(&pts * q), 3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn perturb(pts: &DMatrix<f64>, scale: f64, seed: u64) -> DMatrix<f64> {
        pts + random_cloud(seed, pts.nrows(), pts.ncols()) * scale
    }

    fn max_distortion(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (pairwise_distances(a) - pairwise_distances(b)).amax()
    }

    #[test]
    fn perturbation_below_margin_keeps_edges() {
        let mut below = 0;
        let mut changed_above = 0;
        for seed in 0..40 {
            let pts = random_cloud(seed, 20, 3);
            let k = 3;
            let gamma = knn_margin(&pts, k).unwrap();
            let edges = mutual_knn(&pts, k).unwrap();
            // Below the margin: edge set must survive.
            let small = perturb(&pts, gamma * 0.05, seed + 1000);
            let eta = max_distortion(&pts, &small);
            if 2.0 * eta < gamma {
                below += 1;
                assert_eq!(mutual_knn(&small, k).unwrap(), edges);
            }
            // Far above the margin the edge set usually changes.
            let big = perturb(&pts, 0.5, seed + 2000);
            if mutual_knn(&big, k).unwrap() != edges {
                changed_above += 1;
            }
        }
        assert!(below >= 30);
        assert!(changed_above > 0);
    }

    #[test]
    fn weight_change_bounded_by_lipschitz_constant() {
        for seed in 0..50 {
            let pts = random_cloud(seed, 20, 3);
            let k = 3;
            let g = build_class_graph(&pts, k, 0, (0..20).collect()).unwrap();
            let gamma = knn_margin(&pts, k).unwrap();
            let sigma_min = g.sigma.iter().copied().fold(f64::INFINITY, f64::min);
            let max_len = g.lengths.iter().copied().fold(0.0, f64::max);
            let moved = perturb(&pts, gamma.min(sigma_min) * 0.02, seed + 7);
            let eta = max_distortion(&pts, &moved);
            if !(2.0 * eta < gamma && eta <= sigma_min / 2.0) {
                continue;
            }
            let g2 = build_class_graph(&moved, k, 0, (0..20).collect()).unwrap();
            assert_eq!(g.edges, g2.edges);
            let dw = g
                .weights
                .iter()
                .zip(&g2.weights)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dw <= weight_lipschitz(max_len, eta, sigma_min) * eta);
        }
    }

    #[test]
    fn edge_csv_uses_original_ids() {
        let g = ClassGraph::from_edges(1, vec![10, 20], vec![(0, 1)], vec![0.5], vec![1.0], 1, vec![1.0, 1.0])
            .unwrap();
        assert_eq!(g.to_edge_csv(), "src,dst,weight\n10,20,0.5\n");
    }

    #[test]
    fn isolated_removal_and_components() {
        let g = ClassGraph::unweighted(5, &[(0, 1), (3, 4)]).unwrap();
        let (h, dropped) = g.without_isolated();
        assert_eq!(dropped, 1);
        assert_eq!(h.node_ids, vec![0, 1, 3, 4]);
        assert_eq!(h.edges, vec![(0, 1), (2, 3)]);
        assert_eq!(h.num_components(), 2);
        let parts = h.split_components();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].node_ids, vec![3, 4]);
    }
}
