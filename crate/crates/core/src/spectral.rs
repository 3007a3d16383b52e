//! Spectra of class Laplacians: the torsion proxy (log pseudo-determinant of
//! the normalized Laplacian), spectral entropy, heat traces, and the
//! spanning-tree oracle used to check the normalized Matrix-Tree identity.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassGraph, UnionFind};

/// Absolute nullspace threshold for normalized-Laplacian eigenvalues.
pub const ZERO_TOL: f64 = 1e-10;

/// Symmetry tolerance accepted by [`eigenvalues_sym`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Full spectrum of a symmetric matrix, ascending.
pub fn eigenvalues_sym(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput("matrix is not square".into()));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut eig: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogPseudoDet {
    pub value: f64,
    /// True when no eigenvalue exceeded the tolerance (empty product).
    pub empty: bool,
}

/// Sum of `ln(lambda)` over eigenvalues above `zero_tol`.
pub fn log_pseudo_det(eigs: &[f64], zero_tol: f64) -> Result<LogPseudoDet> {
    if let Some(&neg) = eigs.iter().find(|&&x| x < -zero_tol) {
        return Err(Error::NotPsd(neg));
    }
    let positive: Vec<f64> = eigs.iter().copied().filter(|&x| x > zero_tol).collect();
    Ok(LogPseudoDet {
        value: positive.iter().map(|x| x.ln()).sum(),
        empty: positive.is_empty(),
    })
}

/// Shannon entropy of the L1-normalized positive spectrum.
pub fn spectral_entropy(eigs: &[f64], zero_tol: f64) -> Result<f64> {
    let positive: Vec<f64> = eigs.iter().copied().filter(|&x| x > zero_tol).collect();
    let total: f64 = positive.iter().sum();
    if positive.is_empty() || total <= 0.0 {
        return Err(Error::Undefined("spectral entropy of an all-zero spectrum".into()));
    }
    Ok(-positive
        .iter()
        .map(|x| {
            let p = x / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// `sum_i exp(-t lambda_i)`.
pub fn heat_trace(eigs: &[f64], t: f64) -> f64 {
    eigs.iter().map(|x| (-t * x).exp()).sum()
}

/// Spectral summary of a normalized class Laplacian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub eigenvalues: Vec<f64>,
    pub logdet_reduced: f64,
    pub spectral_entropy: f64,
    /// Keyed by `t` formatted with `{}`.
    pub heat_trace: BTreeMap<String, f64>,
    pub num_components: usize,
    pub zero_tol: f64,
}

pub const HEAT_TIMES: [f64; 3] = [0.5, 1.0, 3.0];

impl SpectralSummary {
    pub fn from_eigenvalues(eigs: Vec<f64>, zero_tol: f64) -> Result<Self> {
        let lpd = log_pseudo_det(&eigs, zero_tol)?;
        let entropy = spectral_entropy(&eigs, zero_tol)?;
        let heat_trace = HEAT_TIMES
            .iter()
            .map(|&t| (format!("{t}"), heat_trace(&eigs, t)))
            .collect();
        let num_components = eigs.iter().filter(|&&x| x <= zero_tol).count();
        Ok(SpectralSummary {
            eigenvalues: eigs,
            logdet_reduced: lpd.value,
            spectral_entropy: entropy,
            heat_trace,
            num_components,
            zero_tol,
        })
    }

    /// Summary of the normalized Laplacian of `g` (which must have no isolated nodes).
    pub fn of_graph(g: &ClassGraph) -> Result<Self> {
        let eigs = eigenvalues_sym(&g.normalized_laplacian()?)?;
        Self::from_eigenvalues(eigs, ZERO_TOL)
    }
}

/// Largest graph the spanning-tree oracle accepts.
pub const ORACLE_MAX_NODES: usize = 12;
const ORACLE_MAX_TREES: u64 = 50_000_000;

/// Weighted spanning-tree partition function by explicit enumeration,
/// cross-checked against a principal cofactor of `D - W`.
pub fn spanning_tree_count(g: &ClassGraph) -> Result<f64> {
    let n = g.num_nodes();
    if n > ORACLE_MAX_NODES {
        return Err(Error::OracleTooLarge(format!("{n} nodes > {ORACLE_MAX_NODES}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty graph".into()));
    }
    if g.num_components() != 1 {
        return Err(Error::Disconnected);
    }
    if n == 1 {
        return Ok(1.0);
    }
    let mut state = Enumeration {
        edges: &g.edges,
        weights: &g.weights,
        n,
        total: 0.0,
        visited: 0,
    };
    state.walk(0, UnionFind::new(n), 0, 1.0)?;
    let enumerated = state.total;

    let cofactor = g
        .combinatorial_laplacian()
        .remove_row(0)
        .remove_column(0)
        .determinant();
    let scale = enumerated.abs().max(cofactor.abs()).max(f64::MIN_POSITIVE);
    if (enumerated - cofactor).abs() > 1e-9 * scale {
        return Err(Error::Consistency(format!(
            "tree enumeration {enumerated} disagrees with cofactor {cofactor}"
        )));
    }
    Ok(enumerated)
}

struct Enumeration<'a> {
    edges: &'a [(usize, usize)],
    weights: &'a [f64],
    n: usize,
    total: f64,
    visited: u64,
}

impl Enumeration<'_> {
    fn walk(&mut self, next: usize, uf: UnionFind, chosen: usize, product: f64) -> Result<()> {
        if chosen == self.n - 1 {
            self.total += product;
            self.visited += 1;
            if self.visited > ORACLE_MAX_TREES {
                return Err(Error::OracleTooLarge("too many spanning trees".into()));
            }
            return Ok(());
        }
        if self.edges.len() - next < self.n - 1 - chosen {
            return Ok(());
        }
        let (a, b) = self.edges[next];
        let mut with = uf.clone();
        if with.union(a, b) {
            self.walk(next + 1, with, chosen + 1, product * self.weights[next])?;
        }
        self.walk(next + 1, uf, chosen, product)
    }
}

/// `|logdet*(L_norm) - sum_components (log tau + log vol - sum log d)|`.
pub fn verify_normalized_mtt(g: &ClassGraph) -> Result<f64> {
    let lhs = log_pseudo_det(&eigenvalues_sym(&g.normalized_laplacian()?)?, ZERO_TOL)?.value;
    let mut rhs = 0.0;
    for comp in g.split_components() {
        if comp.num_nodes() == 1 {
            return Err(Error::InvalidInput("isolated node".into()));
        }
        let tau = spanning_tree_count(&comp)?;
        let vol: f64 = comp.degrees.iter().sum();
        rhs += tau.ln() + vol.ln() - comp.degrees.iter().map(|d| d.ln()).sum::<f64>();
    }
    Ok((lhs - rhs).abs())
}
