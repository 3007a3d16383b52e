//! Two-dimensional clique complexes, their boundary matrices, the Hodge
//! 1-Laplacian and Betti numbers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{ClassGraph, UnionFind};
use crate::spectral::eigenvalues_sym;

/// Default cap on enumerated triangles.
pub const TRIANGLE_CAP: usize = 2_000_000;

/// Nullspace threshold for Hodge 1-Laplacian eigenvalues (integer matrices).
pub const L1_ZERO_TOL: f64 = 1e-8;

/// Sparse signed column: `(row, coefficient)` with ascending rows.
pub type SignedColumn = Vec<(usize, i8)>;

/// Flag complex of a graph truncated at dimension two.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueComplex2 {
    pub num_vertices: usize,
    /// Oriented edges `[i, j]`, `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Oriented triangles `[i, j, k]`, `i < j < k`, sorted.
    pub triangles: Vec<(usize, usize, usize)>,
    /// Columns of `B1` (one per edge): `d[i,j] = [j] - [i]`.
    pub b1: Vec<SignedColumn>,
    /// Columns of `B2` (one per triangle): `d[i,j,k] = [j,k] - [i,k] + [i,j]`.
    pub b2: Vec<SignedColumn>,
}

impl CliqueComplex2 {
    pub fn from_edges(
        num_vertices: usize,
        edge_list: &[(usize, usize)],
        triangle_cap: usize,
    ) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = edge_list
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .filter(|(a, b)| a != b)
            .collect();
        edges.sort_unstable();
        edges.dedup();
        if let Some(&(_, b)) = edges.iter().find(|e| e.1 >= num_vertices) {
            return Err(Error::InvalidInput(format!("vertex {b} out of range")));
        }

        let mut nbrs = vec![Vec::new(); num_vertices];
        for &(a, b) in &edges {
            nbrs[a].push(b);
        }
        // nbrs[a] holds higher neighbors, already ascending.
        let mut triangles = Vec::new();
        for &(i, j) in &edges {
            let (ni, nj) = (&nbrs[i], &nbrs[j]);
            let (mut p, mut q) = (0, 0);
            while p < ni.len() && q < nj.len() {
                match ni[p].cmp(&nj[q]) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        triangles.push((i, j, ni[p]));
                        if triangles.len() > triangle_cap {
                            return Err(Error::TooManyTriangles {
                                count: triangles.len(),
                                cap: triangle_cap,
                            });
                        }
                        p += 1;
                        q += 1;
                    }
                }
            }
        }
        triangles.sort_unstable();

        let b1 = edges.iter().map(|&(i, j)| vec![(i, -1), (j, 1)]).collect();
        let edge_index = |a: usize, b: usize| edges.binary_search(&(a, b)).expect("face edge");
        let b2 = triangles
            .iter()
            .map(|&(i, j, k)| {
                let mut col = vec![(edge_index(j, k), 1i8), (edge_index(i, k), -1), (edge_index(i, j), 1)];
                col.sort_unstable();
                col
            })
            .collect();

        Ok(CliqueComplex2 {
            num_vertices,
            edges,
            triangles,
            b1,
            b2,
        })
    }

    pub fn b1_dense(&self) -> DMatrix<f64> {
        dense(self.num_vertices, &self.b1)
    }

    pub fn b2_dense(&self) -> DMatrix<f64> {
        dense(self.edges.len(), &self.b2)
    }

    /// `B1 B2 == 0`, checked in integer arithmetic.
    pub fn chain_condition_holds(&self) -> bool {
        self.b2.iter().all(|col| {
            let mut acc = vec![0i64; self.num_vertices];
            for &(e, s) in col {
                for &(v, t) in &self.b1[e] {
                    acc[v] += i64::from(s) * i64::from(t);
                }
            }
            acc.iter().all(|&x| x == 0)
        })
    }
}

fn dense(rows: usize, cols: &[SignedColumn]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (c, col) in cols.iter().enumerate() {
        for &(r, s) in col {
            m[(r, c)] = f64::from(s);
        }
    }
    m
}

/// Clique complex of a class graph (weights ignored).
pub fn clique_complex_2(g: &ClassGraph, triangle_cap: usize) -> Result<CliqueComplex2> {
    CliqueComplex2::from_edges(g.num_nodes(), &g.edges, triangle_cap)
}

/// Unweighted Hodge 1-Laplacian `B1^T B1 + B2 B2^T`.
pub fn hodge_l1(c: &CliqueComplex2) -> DMatrix<f64> {
    let m = c.edges.len();
    let mut l = DMatrix::zeros(m, m);
    // B1^T B1: edges sharing a vertex.
    let mut incident = vec![Vec::new(); c.num_vertices];
    for (e, col) in c.b1.iter().enumerate() {
        for &(v, s) in col {
            incident[v].push((e, s));
        }
    }
    for list in &incident {
        for &(e, s) in list {
            for &(f, t) in list {
                l[(e, f)] += f64::from(s) * f64::from(t);
            }
        }
    }
    for col in &c.b2 {
        for &(e, s) in col {
            for &(f, t) in col {
                l[(e, f)] += f64::from(s) * f64::from(t);
            }
        }
    }
    l
}

/// Modular rank of a sparse signed matrix, exact with overwhelming
/// probability for the small-integer matrices used here.
pub fn sparse_rank(columns: &[SignedColumn]) -> usize {
    const P: u64 = (1 << 61) - 1;
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % P as u128) as u64;
    let pow = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mul(r, b);
            }
            b = mul(b, b);
            e >>= 1;
        }
        r
    };
    let to_mod = |s: i8| if s >= 0 { s as u64 } else { P - (-(s as i64)) as u64 };

    // pivot row -> reduced column with that lowest row
    let mut pivots: std::collections::HashMap<usize, Vec<(usize, u64)>> = Default::default();
    let mut rank = 0;
    for col in columns {
        let mut cur: Vec<(usize, u64)> = col.iter().map(|&(r, s)| (r, to_mod(s))).collect();
        while let Some(&(low, val)) = cur.last() {
            let Some(piv) = pivots.get(&low) else {
                break;
            };
            let pv = piv.last().unwrap().1;
            let factor = mul(val, pow(pv, P - 2));
            // cur -= factor * piv
            let mut merged = Vec::with_capacity(cur.len() + piv.len());
            let (mut a, mut b) = (0, 0);
            while a < cur.len() || b < piv.len() {
                let take_a = b >= piv.len() || (a < cur.len() && cur[a].0 < piv[b].0);
                let take_b = a >= cur.len() || (b < piv.len() && piv[b].0 < cur[a].0);
                if take_a {
                    merged.push(cur[a]);
                    a += 1;
                } else if take_b {
                    merged.push((piv[b].0, (P - mul(factor, piv[b].1)) % P));
                    b += 1;
                } else {
                    let v = (cur[a].1 + P - mul(factor, piv[b].1)) % P;
                    if v != 0 {
                        merged.push((cur[a].0, v));
                    }
                    a += 1;
                    b += 1;
                }
            }
            cur = merged;
        }
        if let Some(&(low, _)) = cur.last() {
            pivots.insert(low, cur);
            rank += 1;
        }
    }
    rank
}

/// Betti numbers `(beta0, beta1)` of a clique complex.
///
/// `beta1` comes from `|E| - |V| + beta0 - rank(B2)` and is cross-checked
/// against the nullity of the Hodge 1-Laplacian.
pub fn betti_numbers(c: &CliqueComplex2) -> Result<(usize, usize)> {
    let (b0, b1) = betti_by_rank(c);
    let nullity = l1_nullity(&hodge_l1(c))?;
    if nullity != b1 {
        return Err(Error::Consistency(format!(
            "beta1 by rank formula is {b1} but nullity(L1) is {nullity}"
        )));
    }
    Ok((b0, b1))
}

/// `(beta0, beta1)` from connected components and the rank of `B2`.
pub fn betti_by_rank(c: &CliqueComplex2) -> (usize, usize) {
    let mut uf = UnionFind::new(c.num_vertices);
    let mut b0 = c.num_vertices;
    for &(a, b) in &c.edges {
        if uf.union(a, b) {
            b0 -= 1;
        }
    }
    let rank_b2 = sparse_rank(&c.b2);
    let b1 = c.edges.len() + b0 - c.num_vertices - rank_b2;
    (b0, b1)
}

/// Number of eigenvalues of `l1` at or below [`L1_ZERO_TOL`].
pub fn l1_nullity(l1: &DMatrix<f64>) -> Result<usize> {
    Ok(eigenvalues_sym(l1)?.iter().filter(|&&x| x <= L1_ZERO_TOL).count())
}
