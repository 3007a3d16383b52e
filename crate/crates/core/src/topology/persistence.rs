//! Vietoris–Rips persistence in degrees 0 and 1.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::complex::TRIANGLE_CAP;
use crate::error::{Error, Result};
use crate::graph::UnionFind;

/// Persistence diagram of one homology degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub degree: usize,
    /// Finite `(birth, death)` pairs with `birth < death`.
    pub pairs: Vec<(f64, f64)>,
    /// Births of essential classes, ascending.
    pub essential: Vec<f64>,
}

impl PersistenceDiagram {
    pub fn empty(degree: usize) -> Self {
        PersistenceDiagram {
            degree,
            pairs: Vec::new(),
            essential: Vec::new(),
        }
    }

    pub fn num_essential(&self) -> usize {
        self.essential.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty() && self.essential.is_empty()
    }

    fn finish(mut self) -> Self {
        self.pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        self.essential.sort_by(|a, b| a.partial_cmp(b).unwrap());
        self
    }
}

fn check_distances(dist: &DMatrix<f64>) -> Result<()> {
    if dist.nrows() != dist.ncols() {
        return Err(Error::InvalidInput("distance matrix must be square".into()));
    }
    let n = dist.nrows();
    let scale = dist.amax().max(1.0);
    for i in 0..n {
        if dist[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::InvalidInput(format!("nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let d = dist[(i, j)];
            if !d.is_finite() || d < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "invalid distance {d} at ({i}, {j})"
                )));
            }
            let gap = (d - dist[(j, i)]).abs();
            if gap > 1e-9 * scale {
                return Err(Error::NotSymmetric(gap));
            }
        }
    }
    Ok(())
}

/// H0 and H1 diagrams of the Rips filtration on `dist`, built up to
/// `max_scale` (use `f64::INFINITY` for the full filtration).
///
/// Classes still alive at `max_scale` are essential. Zero-length pairs are
/// dropped.
pub fn vr_persistence(dist: &DMatrix<f64>, max_scale: f64) -> Result<[PersistenceDiagram; 2]> {
    vr_persistence_capped(dist, max_scale, TRIANGLE_CAP)
}

pub fn vr_persistence_capped(
    dist: &DMatrix<f64>,
    max_scale: f64,
    triangle_cap: usize,
) -> Result<[PersistenceDiagram; 2]> {
    check_distances(dist)?;
    if max_scale.is_nan() || max_scale < 0.0 {
        return Err(Error::InvalidInput(format!("invalid max_scale {max_scale}")));
    }
    let n = dist.nrows();

    // Symmetrize against float asymmetry so both orders see one value.
    let d = |i: usize, j: usize| dist[(i.min(j), i.max(j))];
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if d(i, j) <= max_scale {
                edges.push((d(i, j), i, j));
            }
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut h0 = PersistenceDiagram::empty(0);
    let mut h1 = PersistenceDiagram::empty(1);
    let mut uf = UnionFind::new(n);
    let mut positive = vec![false; edges.len()];
    let mut components = n;
    for (e, &(len, i, j)) in edges.iter().enumerate() {
        if uf.union(i, j) {
            components -= 1;
            if len > 0.0 {
                h0.pairs.push((0.0, len));
            }
        } else {
            positive[e] = true;
        }
    }
    h0.essential = vec![0.0; components];

    if positive.iter().any(|&p| p) {
        let mut index = DMatrix::<usize>::from_element(n, n, usize::MAX);
        let mut nbrs = vec![Vec::new(); n];
        for (e, &(_, i, j)) in edges.iter().enumerate() {
            index[(i, j)] = e;
            index[(j, i)] = e;
            nbrs[i].push(j);
        }
        for list in &mut nbrs {
            list.sort_unstable();
        }
        // Triangle columns: sorted edge indices, keyed by the last-added edge.
        let mut columns: Vec<(usize, [usize; 3])> = Vec::new();
        for i in 0..n {
            for (a, &j) in nbrs[i].iter().enumerate() {
                for &k in &nbrs[i][a + 1..] {
                    let jk = index[(j, k)];
                    if jk == usize::MAX {
                        continue;
                    }
                    let mut face = [index[(i, j)], index[(i, k)], jk];
                    face.sort_unstable();
                    columns.push((face[2], face));
                    if columns.len() > triangle_cap {
                        return Err(Error::TooManyTriangles {
                            count: columns.len(),
                            cap: triangle_cap,
                        });
                    }
                }
            }
        }
        columns.sort_unstable();

        let mut pivot_of: Vec<Option<Vec<usize>>> = vec![None; edges.len()];
        for (_, face) in &columns {
            let mut col: Vec<usize> = face.to_vec();
            while let Some(&low) = col.last() {
                match &pivot_of[low] {
                    Some(other) => col = symmetric_difference(&col, other),
                    None => break,
                }
            }
            if let Some(&low) = col.last() {
                let birth = edges[low].0;
                let death = edges[*face.last().unwrap()].0;
                if death > birth {
                    h1.pairs.push((birth, death));
                }
                positive[low] = false;
                pivot_of[low] = Some(col);
            }
        }
        h1.essential = edges
            .iter()
            .zip(&positive)
            .filter(|(_, &p)| p)
            .map(|(e, _)| e.0)
            .collect();
    }
    Ok([h0.finish(), h1.finish()])
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Writes diagrams as CSV `q,birth,death`, with `inf` for essential classes.
pub fn write_diagram_csv(diagrams: &[PersistenceDiagram], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "q,birth,death").unwrap();
    for dg in diagrams {
        for &(b, d) in &dg.pairs {
            writeln!(buf, "{},{b},{d}", dg.degree).unwrap();
        }
        for &b in &dg.essential {
            writeln!(buf, "{},{b},inf", dg.degree).unwrap();
        }
    }
    crate::cache::atomic_write(path, &buf)
}
