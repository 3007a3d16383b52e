//! Self-contained theory checks behind `topogeo verify`.
//!
//! Each check generates its own seeded instances and reports one line.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::curvature::{edge_curvature, edge_curvature_with_metric, shortest_path_metric, CurvatureConfig};
use crate::error::Result;
use crate::graph::{build_class_graph, pairwise_distances, ClassGraph};
use crate::rng::{Rng, Seed};
use crate::spectral::{spanning_tree_count, verify_normalized_mtt};
use crate::ssl::{generalization_bound, objective, score, train_weights, Hyper, Vec5, ViewBatch};
use crate::topology::complex::{betti_by_rank, l1_nullity};
use crate::topology::{bottleneck_distance, hodge_l1, vr_persistence, CliqueComplex2, TRIANGLE_CAP};
use crate::views::{random_orthogonal, torsion_of, torsion_stability_bound};
use crate::features::{class_features, FeatureConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Random connected weighted graph: a shuffled spanning path plus extra edges.
pub fn random_connected_graph(rng: &mut Rng, n: usize, p: f64) -> Result<ClassGraph> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut edges: Vec<(usize, usize)> = perm.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges.sort_unstable();
    let weights: Vec<f64> = edges.iter().map(|_| rng.random_range(0.1..2.0)).collect();
    let m = edges.len();
    ClassGraph::from_edges(0, (0..n).collect(), edges, weights, vec![1.0; m], 0, vec![1.0; n])
}

/// Disjoint union of two graphs, the second shifted past the first.
pub fn disjoint_union(a: &ClassGraph, b: &ClassGraph) -> Result<ClassGraph> {
    let shift = a.num_nodes();
    let n = shift + b.num_nodes();
    let mut edges = a.edges.clone();
    edges.extend(b.edges.iter().map(|&(i, j)| (i + shift, j + shift)));
    let mut weights = a.weights.clone();
    weights.extend(&b.weights);
    let m = edges.len();
    ClassGraph::from_edges(0, (0..n).collect(), edges, weights, vec![1.0; m], 0, vec![1.0; n])
}

pub fn erdos_renyi_edges(rng: &mut Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn gaussian_points(rng: &mut Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

fn cycle(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect()
}

fn betti1_of(n: usize, edges: &[(usize, usize)]) -> Result<(usize, usize)> {
    let c = CliqueComplex2::from_edges(n, edges, TRIANGLE_CAP)?;
    Ok((betti_by_rank(&c).1, l1_nullity(&hodge_l1(&c))?))
}

pub fn check_matrix_tree(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("matrix_tree").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(3..=8);
        let g = random_connected_graph(&mut rng, n, 0.4)?;
        worst = worst.max(verify_normalized_mtt(&g)?);
    }
    let mut worst_split: f64 = 0.0;
    for _ in 0..50 {
        let (n1, n2) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let a = random_connected_graph(&mut rng, n1, 0.5)?;
        let b = random_connected_graph(&mut rng, n2, 0.5)?;
        worst_split = worst_split.max(verify_normalized_mtt(&disjoint_union(&a, &b)?)?);
    }
    let ok = worst < 1e-8 && worst_split < 1e-8;
    Ok(Check::new(
        "normalized matrix-tree identity",
        ok,
        format!("200 connected max residual {worst:.2e}, 50 disconnected max residual {worst_split:.2e}"),
    ))
}

pub fn check_hodge_betti(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("hodge").rng();
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(4..=20);
        let p = rng.random_range(0.1..0.6);
        let (rank, nullity) = betti1_of(n, &erdos_renyi_edges(&mut rng, n, p))?;
        mismatches += usize::from(rank != nullity);
    }
    let mut two_c5 = cycle(5);
    two_c5.extend(cycle(5).iter().map(|&(a, b)| (a + 5, b + 5)));
    let canonical = [
        (betti1_of(4, &cycle(4))?, 1),
        (betti1_of(3, &cycle(3))?, 0),
        (betti1_of(10, &two_c5)?, 2),
    ];
    let canon_ok = canonical.iter().all(|&((r, nl), want)| r == want && nl == want);
    Ok(Check::new(
        "hodge nullity equals betti rank formula",
        mismatches == 0 && canon_ok,
        format!("{mismatches}/100 random mismatches; C4, filled K3, two C5 canonical {}", if canon_ok { "ok" } else { "wrong" }),
    ))
}

pub fn check_rotation_invariance(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("rotation").rng();
    let cfg = FeatureConfig { curvature: CurvatureConfig::exact(), ..FeatureConfig::with_k(4) };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let pts = gaussian_points(&mut rng, 30, 6);
        let base = class_features(&pts, 0, &cfg)?;
        for _ in 0..3 {
            let q = random_orthogonal(6, &mut rng);
            let rot = class_features(&(&pts * &q), 0, &cfg)?;
            let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(x), Some(y)) => (x - y).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(diff(base.torsion, rot.torsion)).max(diff(base.mean_kappa, rot.mean_kappa));
            let (ta, tb) = (base.topology.as_ref(), rot.topology.as_ref());
            worst = worst.max(diff(ta.map(|t| t.l1_logdet_reduced), tb.map(|t| t.l1_logdet_reduced)));
            worst = worst.max(diff(ta.map(|t| t.l1_nullity as f64), tb.map(|t| t.l1_nullity as f64)));
        }
    }
    Ok(Check::new(
        "orthogonal rotation invariance",
        worst < 1e-9,
        format!("max class-signal change {worst:.2e} over 15 rotations"),
    ))
}

/// Calibrated perturbations below half the kNN margin keep the edge set and
/// respect the torsion bound.
pub fn check_view_stability(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("view_stability").rng();
    let k = 4;
    let (mut edges_kept, mut bound_held, mut done) = (0, 0, 0);
    while done < 100 {
        let pts = gaussian_points(&mut rng, 20, 4);
        let g = build_class_graph(&pts, k, 0, vec![0; 20])?;
        let (g, isolated) = g.without_isolated();
        if isolated > 0 || g.num_edges() == 0 {
            continue;
        }
        let dist = pairwise_distances(&pts);
        let gamma = crate::graph::knn_margin_from_distances(&dist, k)?;
        let noise = DMatrix::from_fn(20, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut scale = gamma;
        let mut found = None;
        for _ in 0..60 {
            let moved = &pts + &noise * scale;
            let eta = (pairwise_distances(&moved) - &dist).amax();
            if 2.0 * eta < gamma {
                if let Some(bound) = torsion_stability_bound(&g, eta)? {
                    found = Some((moved, bound));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((moved, bound)) = found else { continue };
        done += 1;
        let h = build_class_graph(&moved, k, 0, vec![0; 20])?.without_isolated().0;
        if h.edges == g.edges {
            edges_kept += 1;
            bound_held += usize::from((torsion_of(&h)? - torsion_of(&g)?).abs() <= bound);
        }
    }
    Ok(Check::new(
        "perturbation stability below the kNN margin",
        edges_kept == 100 && bound_held == 100,
        format!("edge set kept {edges_kept}/100, torsion bound held {bound_held}/100"),
    ))
}

pub fn check_vr_stability(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("vr").rng();
    let eta = 0.01;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let pts = DMatrix::from_fn(10, 2, |_, _| rng.random_range(0.0..1.0));
        let d = pairwise_distances(&pts);
        let mut e = DMatrix::zeros(10, 10);
        for i in 0..10 {
            for j in i + 1..10 {
                let x: f64 = rng.random_range(-eta..eta);
                e[(i, j)] = x;
                e[(j, i)] = x;
            }
        }
        let d2 = &d + &e;
        let norm = e.amax();
        let scale = d.max().max(d2.max()) + 1.0;
        let (a, b) = (vr_persistence(&d, scale)?, vr_persistence(&d2, scale)?);
        for q in 0..2 {
            let bn = bottleneck_distance(&a[q], &b[q]);
            worst_ratio = worst_ratio.max(bn / norm);
            violations += usize::from(bn > norm + 1e-12);
        }
    }
    let square = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    let h1 = &vr_persistence(&pairwise_distances(&square), 2.0)?[1];
    let square_ok = h1.essential.is_empty()
        && h1.pairs.len() == 1
        && (h1.pairs[0].0 - 1.0).abs() < 1e-9
        && (h1.pairs[0].1 - 2f64.sqrt()).abs() < 1e-9;
    Ok(Check::new(
        "rips bottleneck stability",
        violations == 0 && square_ok,
        format!(
            "{violations}/100 diagram violations (max ratio {worst_ratio:.3}); unit-square H1 bar {}",
            if square_ok { "(1, sqrt2)" } else { "wrong" }
        ),
    ))
}

pub fn check_transport(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("transport").rng();
    let exact = CurvatureConfig::exact();
    let sinkhorn = CurvatureConfig::default();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(4..=12);
        let g = random_connected_graph(&mut rng, n, 0.3)?;
        let (u, v) = g.edges[rng.random_range(0..g.num_edges())];
        let support = g.adjacency()[u].len() + g.adjacency()[v].len() + 2;
        if support > 20 {
            continue;
        }
        done += 1;
        let metric = shortest_path_metric(&g);
        let a = edge_curvature_with_metric(&g, &metric, u, v, &exact)?.w1;
        let b = edge_curvature_with_metric(&g, &metric, u, v, &sinkhorn)?.w1;
        worst = worst.max((a - b).abs() / a.max(f64::MIN_POSITIVE));
    }
    let p3 = ClassGraph::unweighted(3, &[(0, 1), (1, 2)])?;
    let c6 = ClassGraph::unweighted(6, &cycle(6))?;
    let p3_k = edge_curvature(&p3, 0, 1, &exact)?;
    let c6_k = (0..6).map(|i| edge_curvature(&c6, c6.edges[i].0, c6.edges[i].1, &exact)).collect::<Result<Vec<_>>>()?;
    let fixtures = (p3_k - 0.5).abs() <= 1e-6 && c6_k.iter().all(|x| x.abs() <= 1e-6);
    Ok(Check::new(
        "sinkhorn agrees with exact transport",
        worst <= 0.05 && fixtures,
        format!("max relative W1 gap {worst:.4} on 100 edges; P3 kappa {p3_k:.6}, C6 kappa max |{:.1e}|", c6_k.iter().fold(0.0f64, |m, x| m.max(x.abs()))),
    ))
}

fn random_vec(rng: &mut Rng, lo: f64, hi: f64) -> Vec5 {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn random_batch(rng: &mut Rng, anchors: usize) -> Result<ViewBatch> {
    let mut b = ViewBatch::new((0..anchors).map(|_| random_vec(rng, -1.0, 1.0)).collect());
    for i in 0..anchors {
        let a = b.anchors[i];
        let pos = random_vec(rng, -0.2, 0.2);
        b.add_positive(i, std::array::from_fn(|j| a[j] + pos[j]))?;
        let neg = random_vec(rng, -0.5, 1.5);
        b.add_negative(i, std::array::from_fn(|j| a[j] + neg[j]))?;
    }
    Ok(b)
}

pub fn check_ssl_convexity(seed: u64) -> Result<Check> {
    let mut rng = Seed::new(seed).child("ssl").rng();
    let h = Hyper::default();
    let (mut jensen, mut strong) = (0, 0);
    for _ in 0..1000 {
        let batch = random_batch(&mut rng, 4)?;
        let w1 = random_vec(&mut rng, 0.0, 2.0);
        let w2 = random_vec(&mut rng, 0.0, 2.0);
        let t: f64 = rng.random_range(0.0..1.0);
        let mix: Vec5 = std::array::from_fn(|i| t * w1[i] + (1.0 - t) * w2[i]);
        let (f1, f2, fm) = (objective(&w1, &batch, &h), objective(&w2, &batch, &h), objective(&mix, &batch, &h));
        let chord = t * f1 + (1.0 - t) * f2;
        let gap: f64 = w1.iter().zip(&w2).map(|(a, b)| (a - b).powi(2)).sum();
        jensen += usize::from(fm > chord + 1e-12);
        strong += usize::from(fm > chord - h.mu * t * (1.0 - t) * gap + 1e-12);
    }

    let mut one_d = ViewBatch::new(vec![[0.0; 5]]);
    one_d.add_positive(0, [0.0; 5])?;
    one_d.add_negative(0, [2.0, 0.0, 0.0, 0.0, 0.0])?;
    let fine = Hyper { step_size: 1e-4, ..Hyper::default() };
    let w1 = train_weights(&one_d, &fine)?.w[0];

    let mut mono = 0;
    for _ in 0..1000 {
        let w = random_vec(&mut rng, 0.0, 1.0);
        let g = random_vec(&mut rng, -2.0, 2.0);
        let up = random_vec(&mut rng, 0.0, 1.0);
        let g2: Vec5 = std::array::from_fn(|i| g[i] + up[i]);
        mono += usize::from(score(&w, &g2)? < score(&w, &g)?);
    }
    let ok = jensen == 0 && strong == 0 && (w1 - 0.25).abs() <= 1e-3 && mono == 0;
    Ok(Check::new(
        "ssl objective convexity and score monotonicity",
        ok,
        format!("jensen violations {jensen}/1000, strong-convexity violations {strong}/1000, 1-D optimum w1={w1:.5}, monotonicity violations {mono}/1000"),
    ))
}

/// Population objective estimate for the bound check: views with `|a|, |b| <= 1`.
fn bounded_batch(rng: &mut Rng, pairs: usize) -> Result<ViewBatch> {
    let mut clip = |lo: f64, hi: f64| {
        let v = random_vec(rng, lo, hi);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1.0 { v.map(|x| x / n) } else { v }
    };
    let mut b = ViewBatch::new(vec![[0.0; 5]]);
    for _ in 0..pairs {
        let a = clip(-0.3, 0.3);
        b.add_positive(0, a.map(|x| -x))?;
        b.add_negative(0, clip(-0.2, 0.6))?;
    }
    Ok(b)
}

pub fn check_bound(seed: u64) -> Result<Check> {
    let worked = generalization_bound(1600, 1600, 1.0, 1.0, 0.5, 1.0, 0.05)?.total;
    let mut rng = Seed::new(seed).child("bound").rng();
    let h = Hyper { steps: 300, ..Hyper::default() };
    let pairs = 200;
    let bound = generalization_bound(pairs, pairs, 1.0, 1.0, h.margin, h.lambda, 0.05)?.total;
    let population = bounded_batch(&mut rng, 20_000)?;
    let mut held = 0;
    for _ in 0..100 {
        let sample = bounded_batch(&mut rng, pairs)?;
        let mut w = train_weights(&sample, &h)?.w;
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1.0 {
            w = w.map(|x| x / n);
        }
        held += usize::from(objective(&w, &population, &h) - objective(&w, &sample, &h) <= bound);
    }
    let ok = (worked - 0.7406).abs() <= 1e-4 && held >= 95;
    Ok(Check::new(
        "finite-sample generalization bound",
        ok,
        format!("worked value {worked:.5} for 1600/1600 pairs; held {held}/100 trials at 200 pairs (bound {bound:.4})"),
    ))
}

/// Spanning-tree enumeration agrees with the cofactor on a fixed fixture.
fn check_tree_oracle() -> Result<Check> {
    let k4 = ClassGraph::unweighted(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])?;
    let count = spanning_tree_count(&k4)?;
    Ok(Check::new("spanning-tree oracle", (count - 16.0).abs() < 1e-9, format!("K4 has {count} spanning trees")))
}

/// Runs every check; the seed makes the run reproducible.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_tree_oracle()?,
        check_matrix_tree(seed)?,
        check_hodge_betti(seed)?,
        check_rotation_invariance(seed)?,
        check_view_stability(seed)?,
        check_vr_stability(seed)?,
        check_transport(seed)?,
        check_ssl_convexity(seed)?,
        check_bound(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = run_all(0).unwrap();
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
        assert_eq!(checks.len(), 9);
    }

    #[test]
    fn reproducible() {
        assert_eq!(check_hodge_betti(3).unwrap(), check_hodge_betti(3).unwrap());
        assert!(check_matrix_tree(1).unwrap().line().starts_with("[PASS]"));
    }
}
