//! Ollivier-Ricci curvature of class-graph edges.
//!
//! `kappa(u, v) = 1 - W1(mu_u, mu_v) / d(u, v)` where `mu_x` is the lazy random
//! walk at `x` (mass `alpha` stays, the rest spreads proportionally to edge
//! weight) and `d` is the shortest-path metric with Euclidean edge lengths.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ClassGraph;
use crate::transport::{w1_exact, w1_sinkhorn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exact,
    Sinkhorn,
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Solver::Exact),
            "sinkhorn" => Ok(Solver::Sinkhorn),
            other => Err(Error::InvalidInput(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureConfig {
    pub alpha: f64,
    pub solver: Solver,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            alpha: 0.5,
            solver: Solver::Sinkhorn,
            sinkhorn_eps: 0.005,
            sinkhorn_iters: 2000,
        }
    }
}

impl CurvatureConfig {
    pub fn exact() -> Self {
        CurvatureConfig {
            solver: Solver::Exact,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("laziness {} not in (0,1)", self.alpha)));
        }
        Ok(())
    }
}

/// Lazy random-walk distribution at `node`, indexed by node.
pub fn lazy_walk_distribution(g: &ClassGraph, node: usize, alpha: f64) -> Result<Vec<f64>> {
    if node >= g.num_nodes() {
        return Err(Error::InvalidInput(format!("node {node} out of range")));
    }
    let d = g.degrees[node];
    if d <= 0.0 {
        return Err(Error::InvalidInput(format!("node {node} is isolated")));
    }
    let mut mu = vec![0.0; g.num_nodes()];
    mu[node] = alpha;
    for (&(i, j), &w) in g.edges.iter().zip(&g.weights) {
        if i == node {
            mu[j] += (1.0 - alpha) * w / d;
        } else if j == node {
            mu[i] += (1.0 - alpha) * w / d;
        }
    }
    Ok(mu)
}

/// All-pairs shortest paths using edge lengths (Floyd-Warshall).
pub fn shortest_path_metric(g: &ClassGraph) -> DMatrix<f64> {
    let n = g.num_nodes();
    let mut d = DMatrix::from_element(n, n, f64::INFINITY);
    for v in 0..n {
        d[(v, v)] = 0.0;
    }
    for (&(i, j), &l) in g.edges.iter().zip(&g.lengths) {
        if l < d[(i, j)] {
            d[(i, j)] = l;
            d[(j, i)] = l;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[(i, k)];
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[(k, j)];
                if via < d[(i, j)] {
                    d[(i, j)] = via;
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCurvature {
    pub kappa: f64,
    pub w1: f64,
    /// Sinkhorn marginal residual (0 for the exact solver).
    pub residual: f64,
}

/// Curvature of the edge `(u, v)` given the precomputed ground metric.
pub fn edge_curvature_with_metric(
    g: &ClassGraph,
    metric: &DMatrix<f64>,
    u: usize,
    v: usize,
    cfg: &CurvatureConfig,
) -> Result<EdgeCurvature> {
    cfg.validate()?;
    let duv = metric[(u, v)];
    if duv.is_infinite() {
        return Err(Error::Disconnected);
    }
    if duv <= 0.0 {
        return Err(Error::Undefined(format!("edge ({u},{v}) has zero length")));
    }
    let mu = lazy_walk_distribution(g, u, cfg.alpha)?;
    let nu = lazy_walk_distribution(g, v, cfg.alpha)?;
    let nodes: Vec<usize> = (0..g.num_nodes()).filter(|&x| mu[x] > 0.0 || nu[x] > 0.0).collect();
    let a: Vec<f64> = nodes.iter().map(|&x| mu[x]).collect();
    let b: Vec<f64> = nodes.iter().map(|&x| nu[x]).collect();
    let cost = DMatrix::from_fn(nodes.len(), nodes.len(), |i, j| metric[(nodes[i], nodes[j])]);
    if cost.iter().any(|c| c.is_infinite()) {
        return Err(Error::Disconnected);
    }
    let (w1, residual) = match cfg.solver {
        Solver::Exact => (w1_exact(&a, &b, &cost)?, 0.0),
        Solver::Sinkhorn => {
            let r = w1_sinkhorn(&a, &b, &cost, cfg.sinkhorn_eps, cfg.sinkhorn_iters)?;
            (r.cost, r.residual)
        }
    };
    Ok(EdgeCurvature {
        kappa: 1.0 - w1 / duv,
        w1,
        residual,
    })
}

/// Curvature of one edge; computes the ground metric on the fly.
pub fn edge_curvature(g: &ClassGraph, u: usize, v: usize, cfg: &CurvatureConfig) -> Result<f64> {
    if !g.edges.contains(&(u.min(v), u.max(v))) {
        return Err(Error::InvalidInput(format!("({u},{v}) is not an edge")));
    }
    let metric = shortest_path_metric(g);
    Ok(edge_curvature_with_metric(g, &metric, u, v, cfg)?.kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSummary {
    /// `((u, v), kappa)` in edge order; zero-length edges are absent.
    pub edge_kappa: Vec<((usize, usize), f64)>,
    pub mean_kappa: f64,
    pub solver: Solver,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub laziness: f64,
    /// Edges skipped because their endpoints coincide.
    pub zero_length_edges: usize,
    pub max_residual: f64,
}

/// Per-edge curvatures and their unweighted mean for one class graph.
pub fn mean_curvature(g: &ClassGraph, cfg: &CurvatureConfig) -> Result<CurvatureSummary> {
    if g.edges.is_empty() {
        return Err(Error::Edgeless);
    }
    let metric = shortest_path_metric(g);
    let mut edge_kappa = Vec::with_capacity(g.num_edges());
    let mut zero_length_edges = 0;
    let mut max_residual: f64 = 0.0;
    for &(u, v) in &g.edges {
        match edge_curvature_with_metric(g, &metric, u, v, cfg) {
            Ok(e) => {
                max_residual = max_residual.max(e.residual);
                edge_kappa.push(((u, v), e.kappa));
            }
            Err(Error::Undefined(_)) => zero_length_edges += 1,
            Err(e) => return Err(e),
        }
    }
    if edge_kappa.is_empty() {
        return Err(Error::Undefined("every edge has zero length".into()));
    }
    if cfg.solver == Solver::Sinkhorn && max_residual >= crate::transport::SINKHORN_TOL {
        log::debug!(
            "sinkhorn stopped at {} iterations with marginal residual {max_residual:.3e}",
            cfg.sinkhorn_iters
        );
    }
    let mean_kappa = edge_kappa.iter().map(|(_, k)| k).sum::<f64>() / edge_kappa.len() as f64;
    Ok(CurvatureSummary {
        edge_kappa,
        mean_kappa,
        solver: cfg.solver,
        sinkhorn_eps: cfg.sinkhorn_eps,
        sinkhorn_iters: cfg.sinkhorn_iters,
        laziness: cfg.alpha,
        zero_length_edges,
        max_residual,
    })
}
