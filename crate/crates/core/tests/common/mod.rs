//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topogeo::graph::ClassGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted undirected graph as plain lists.
#[derive(Debug, Clone)]
pub struct Wg {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

impl Wg {
    pub fn to_class_graph(&self) -> ClassGraph {
        let m = self.edges.len();
        ClassGraph::from_edges(0, (0..self.n).collect(), self.edges.clone(), self.weights.clone(), vec![1.0; m], 0, vec![1.0; self.n])
            .unwrap()
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for (&(i, j), &x) in self.edges.iter().zip(&self.weights) {
            w[(i, j)] += x;
            w[(j, i)] += x;
        }
        w
    }

    pub fn degrees(&self) -> Vec<f64> {
        let w = self.weight_matrix();
        (0..self.n).map(|i| w.row(i).sum()).collect()
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.neighbours();
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(x) = queue.pop_front() {
                for &y in &adj[x] {
                    if !seen[y] {
                        seen[y] = true;
                        comp.push(y);
                        queue.push_back(y);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Connected graph: random spanning path plus Bernoulli(p) extra edges.
pub fn random_connected(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Wg {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut set: BTreeSet<(usize, usize)> = perm.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                set.insert((i, j));
            }
        }
    }
    let edges: Vec<_> = set.into_iter().collect();
    let weights = edges.iter().map(|_| rng.random_range(0.05..3.0)).collect();
    Wg { n, edges, weights }
}

pub fn disjoint_union(a: &Wg, b: &Wg) -> Wg {
    let mut edges = a.edges.clone();
    edges.extend(b.edges.iter().map(|&(i, j)| (i + a.n, j + a.n)));
    let mut weights = a.weights.clone();
    weights.extend(&b.weights);
    Wg { n: a.n + b.n, edges, weights }
}

/// `sum log lambda` over eigenvalues above `tol` of `I - D^-1/2 W D^-1/2`.
pub fn normalized_logdet(g: &Wg, tol: f64) -> f64 {
    let w = g.weight_matrix();
    let d = g.degrees();
    let l = DMatrix::from_fn(g.n, g.n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - w[(i, j)] / (d[i] * d[j]).sqrt()
    });
    l.symmetric_eigenvalues().iter().filter(|&&x| x > tol).map(|x| x.ln()).sum()
}

/// Sum over components of `log tau + log vol - sum log d`, with the weighted
/// tree count from a principal cofactor of `D - W`.
pub fn matrix_tree_rhs(g: &Wg) -> f64 {
    let w = g.weight_matrix();
    let d = g.degrees();
    g.components()
        .iter()
        .map(|comp| {
            let m = comp.len();
            assert!(m >= 2, "isolated node");
            let lap = DMatrix::from_fn(m, m, |a, b| {
                let (i, j) = (comp[a], comp[b]);
                if i == j { d[i] } else { -w[(i, j)] }
            });
            let tau = lap.remove_row(0).remove_column(0).determinant();
            let vol: f64 = comp.iter().map(|&i| d[i]).sum();
            tau.ln() + vol.ln() - comp.iter().map(|&i| d[i].ln()).sum::<f64>()
        })
        .sum()
}

pub fn euclidean(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| (points.row(i) - points.row(j)).norm())
}

/// Mutual kNN edges by sorting every distance row.
pub fn mutual_knn(dist: &DMatrix<f64>, k: usize) -> Vec<(usize, usize)> {
    let n = dist.nrows();
    let lists: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist[(i, a)].total_cmp(&dist[(i, b)]).then(a.cmp(&b)));
            others.into_iter().take(k).collect()
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if lists[i].contains(&j) && lists[j].contains(&i) {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn triangles(n: usize, edges: &[(usize, usize)]) -> Vec<(usize, usize, usize)> {
    let set: BTreeSet<_> = edges.iter().copied().collect();
    let mut out = Vec::new();
    for &(a, b) in edges {
        for c in b + 1..n {
            if set.contains(&(a, c)) && set.contains(&(b, c)) {
                out.push((a, b, c));
            }
        }
    }
    out
}

const P: i128 = 1_000_000_007;

/// Rank of an integer matrix by Gaussian elimination modulo a prime.
pub fn rank_mod_p(mut m: Vec<Vec<i128>>) -> usize {
    let rows = m.len();
    let cols = if rows == 0 { 0 } else { m[0].len() };
    let modp = |x: i128| ((x % P) + P) % P;
    let inv = |x: i128| {
        let (mut base, mut e, mut acc) = (modp(x), P - 2, 1i128);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base % P;
            }
            base = base * base % P;
            e >>= 1;
        }
        acc
    };
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| modp(m[r][c]) != 0) else { continue };
        m.swap(rank, p);
        let iv = inv(m[rank][c]);
        for r in 0..rows {
            if r != rank && modp(m[r][c]) != 0 {
                let f = modp(m[r][c]) * iv % P;
                for j in 0..cols {
                    m[r][j] = modp(m[r][j] - f * modp(m[rank][j]));
                }
            }
        }
        rank += 1;
    }
    rank
}

/// beta1 of the clique complex: |E| - |V| + beta0 - rank(B2).
pub fn betti1(n: usize, edges: &[(usize, usize)]) -> usize {
    let tris = triangles(n, edges);
    let index = |e: (usize, usize)| edges.iter().position(|&x| x == e).unwrap();
    let mut b2 = vec![vec![0i128; tris.len()]; edges.len()];
    for (t, &(a, b, c)) in tris.iter().enumerate() {
        b2[index((b, c))][t] += 1;
        b2[index((a, c))][t] -= 1;
        b2[index((a, b))][t] += 1;
    }
    let g = Wg { n, edges: edges.to_vec(), weights: vec![1.0; edges.len()] };
    let beta0 = g.components().len();
    edges.len() + beta0 - n - rank_mod_p(b2)
}

/// Rips persistence over the full filtration (simplices up to dimension 2)
/// by the standard Z/2 column reduction. Returns finite pairs and essential
/// births for degrees 0 and 1; zero-length pairs are dropped.
pub fn rips_reduction(dist: &DMatrix<f64>) -> [(Vec<(f64, f64)>, Vec<f64>); 2] {
    let n = dist.nrows();
    let mut simplices: Vec<(f64, usize, Vec<usize>)> = (0..n).map(|i| (0.0, 0, vec![i])).collect();
    for i in 0..n {
        for j in i + 1..n {
            simplices.push((dist[(i, j)], 1, vec![i, j]));
            for k in j + 1..n {
                let f = dist[(i, j)].max(dist[(i, k)]).max(dist[(j, k)]);
                simplices.push((f, 2, vec![i, j, k]));
            }
        }
    }
    simplices.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let position: std::collections::HashMap<Vec<usize>, usize> =
        simplices.iter().enumerate().map(|(i, s)| (s.2.clone(), i)).collect();
    let mut columns: Vec<BTreeSet<usize>> = simplices
        .iter()
        .map(|s| {
            if s.1 == 0 {
                return BTreeSet::new();
            }
            (0..s.2.len())
                .map(|drop| {
                    let face: Vec<usize> = s.2.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, &v)| v).collect();
                    position[&face]
                })
                .collect()
        })
        .collect();
    let mut owner_of_low: std::collections::HashMap<usize, usize> = Default::default();
    let mut paired = vec![false; simplices.len()];
    let mut out: [(Vec<(f64, f64)>, Vec<f64>); 2] = Default::default();
    for j in 0..simplices.len() {
        while let Some(&low) = columns[j].iter().next_back() {
            match owner_of_low.get(&low) {
                Some(&other) => {
                    let add = columns[other].clone();
                    columns[j] = columns[j].symmetric_difference(&add).copied().collect();
                }
                None => {
                    owner_of_low.insert(low, j);
                    paired[low] = true;
                    paired[j] = true;
                    let q = simplices[low].1;
                    let (b, d) = (simplices[low].0, simplices[j].0);
                    if q < 2 && d > b {
                        out[q].0.push((b, d));
                    }
                    break;
                }
            }
        }
    }
    for (i, s) in simplices.iter().enumerate() {
        if !paired[i] && s.1 < 2 && columns[i].is_empty() {
            out[s.1].1.push(s.0);
        }
    }
    for d in out.iter_mut() {
        d.0.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        d.1.sort_by(f64::total_cmp);
    }
    out
}

fn try_kuhn(u: usize, adj: &[Vec<usize>], seen: &mut [bool], matched: &mut [Option<usize>]) -> bool {
    for &v in &adj[u] {
        if !seen[v] {
            seen[v] = true;
            if matched[v].is_none() || try_kuhn(matched[v].unwrap(), adj, seen, matched) {
                matched[v] = Some(u);
                return true;
            }
        }
    }
    false
}

fn perfect_matching(adj: &[Vec<usize>], right: usize) -> bool {
    let mut matched = vec![None; right];
    (0..adj.len()).all(|u| try_kuhn(u, adj, &mut vec![false; right], &mut matched))
}

/// Bottleneck distance between finite diagrams with diagonal matching, by
/// trying every candidate threshold in increasing order.
pub fn bottleneck(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let linf = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).abs().max((p.1 - q.1).abs());
    let half = |p: (f64, f64)| (p.1 - p.0) / 2.0;
    let mut candidates: Vec<f64> = a.iter().chain(b).map(|&p| half(p)).collect();
    for &p in a {
        for &q in b {
            candidates.push(linf(p, q));
        }
    }
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    // Left: a points then diagonal slots for b. Right: b points then diagonal slots for a.
    for &t in &candidates {
        let mut adj = vec![Vec::new(); na + nb];
        for i in 0..na {
            for j in 0..nb {
                if linf(a[i], b[j]) <= t {
                    adj[i].push(j);
                }
            }
            if half(a[i]) <= t {
                adj[i].push(nb + i);
            }
        }
        for j in 0..nb {
            if half(b[j]) <= t {
                adj[na + j].push(j);
            }
            adj[na + j].extend(nb..nb + na);
        }
        if perfect_matching(&adj, na + nb) {
            return t;
        }
    }
    f64::INFINITY
}

/// Exact transport cost by successive shortest paths (Bellman-Ford) on the
/// bipartite network source -> supply -> demand -> sink.
pub fn transport_cost(mu: &[f64], nu: &[f64], cost: &DMatrix<f64>) -> f64 {
    let (m, n) = (mu.len(), nu.len());
    let (src, sink) = (m + n, m + n + 1);
    let nodes = m + n + 2;
    // arcs: (to, cap, cost, rev)
    let mut arcs: Vec<Vec<(usize, f64, f64, usize)>> = vec![Vec::new(); nodes];
    let add = |arcs: &mut Vec<Vec<(usize, f64, f64, usize)>>, u: usize, v: usize, cap: f64, c: f64| {
        let (ru, rv) = (arcs[v].len(), arcs[u].len());
        arcs[u].push((v, cap, c, ru));
        arcs[v].push((u, 0.0, -c, rv));
    };
    for i in 0..m {
        add(&mut arcs, src, i, mu[i], 0.0);
        for j in 0..n {
            add(&mut arcs, i, m + j, f64::INFINITY, cost[(i, j)]);
        }
    }
    for j in 0..n {
        add(&mut arcs, m + j, sink, nu[j], 0.0);
    }
    let mut remaining: f64 = mu.iter().sum::<f64>().min(nu.iter().sum());
    let mut total = 0.0;
    while remaining > 1e-14 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for (k, &(v, cap, c, _)) in arcs[u].iter().enumerate() {
                    if cap > 1e-15 && dist[u] + c < dist[v] - 1e-15 {
                        dist[v] = dist[u] + c;
                        prev[v] = Some((u, k));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            break;
        }
        let mut push = remaining;
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            push = push.min(arcs[u][k].1);
            v = u;
        }
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            arcs[u][k].1 -= push;
            let (to, rev) = (arcs[u][k].0, arcs[u][k].3);
            arcs[to][rev].1 += push;
            v = u;
        }
        total += push * dist[sink];
        remaining -= push;
    }
    total
}

/// Lazy walk measure at `x`: mass `alpha` stays, the rest spreads by weight.
pub fn lazy_walk(g: &Wg, x: usize, alpha: f64) -> Vec<f64> {
    let w = g.weight_matrix();
    let d: f64 = w.row(x).sum();
    (0..g.n)
        .map(|y| if y == x { alpha } else { (1.0 - alpha) * w[(x, y)] / d })
        .collect()
}

/// Hop-count metric by breadth-first search.
pub fn hop_metric(g: &Wg) -> DMatrix<f64> {
    let adj = g.neighbours();
    let mut out = DMatrix::from_element(g.n, g.n, f64::INFINITY);
    for s in 0..g.n {
        out[(s, s)] = 0.0;
        let mut queue = VecDeque::from([s]);
        while let Some(x) = queue.pop_front() {
            for &y in &adj[x] {
                if out[(s, y)].is_infinite() {
                    out[(s, y)] = out[(s, x)] + 1.0;
                    queue.push_back(y);
                }
            }
        }
    }
    out
}

/// Uniform random orthogonal matrix from the QR of a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
