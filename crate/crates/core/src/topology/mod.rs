//! Higher-order topology of class graphs and class point clouds.
//!
//! The Hodge branch works on the clique complex of the mutual kNN graph; the
//! persistence branch works on the Rips filtration of the class points up to
//! the longest graph edge.

pub mod bottleneck;
pub mod complex;
pub mod persistence;
pub mod summaries;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use bottleneck::bottleneck_distance;
pub use complex::{betti_numbers, clique_complex_2, hodge_l1, CliqueComplex2, L1_ZERO_TOL, TRIANGLE_CAP};
pub use persistence::{vr_persistence, write_diagram_csv, PersistenceDiagram};
pub use summaries::{ph_summaries, ImageConfig, PhSummary};

use crate::error::{Error, Result};
use crate::graph::ClassGraph;
use crate::spectral::{eigenvalues_sym, log_pseudo_det, spectral_entropy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub l1_logdet_reduced: f64,
    /// `beta1` of the clique complex, equal to the nullity of `L1`.
    pub l1_nullity: usize,
    pub l1_spectral_entropy: f64,
    pub num_triangles: usize,
    pub beta0: usize,
    pub max_scale: f64,
    pub ph_h0: PhSummary,
    pub ph_h1: PhSummary,
    pub h0_essential: usize,
    pub h1_essential: usize,
}

/// Hodge and persistence summaries for one class.
///
/// `dist` holds pairwise distances of the class points in node order.
pub fn topology_summary(
    g: &ClassGraph,
    dist: &DMatrix<f64>,
    image: &ImageConfig,
) -> Result<TopologySummary> {
    if g.num_edges() == 0 {
        return Err(Error::Edgeless);
    }
    let complex = clique_complex_2(g, TRIANGLE_CAP)?;
    let l1 = hodge_l1(&complex);
    let eigs = eigenvalues_sym(&l1)?;
    let nullity = eigs.iter().filter(|&&x| x <= L1_ZERO_TOL).count();
    let (beta0, beta1) = complex::betti_by_rank(&complex);
    if beta1 != nullity {
        return Err(Error::Consistency(format!(
            "beta1 by rank formula is {beta1} but nullity(L1) is {nullity}"
        )));
    }
    let logdet = log_pseudo_det(&eigs, L1_ZERO_TOL)?;
    let entropy = spectral_entropy(&eigs, L1_ZERO_TOL)?;

    let max_scale = g.lengths.iter().copied().fold(0.0, f64::max);
    let [h0, h1] = vr_persistence(dist, max_scale)?;
    Ok(TopologySummary {
        l1_logdet_reduced: logdet.value,
        l1_nullity: nullity,
        l1_spectral_entropy: entropy,
        num_triangles: complex.triangles.len(),
        beta0,
        max_scale,
        ph_h0: ph_summaries(&h0, max_scale, image)?,
        ph_h1: ph_summaries(&h1, max_scale, image)?,
        h0_essential: h0.num_essential(),
        h1_essential: h1.num_essential(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_class_graph, pairwise_distances};
    use crate::rng::Seed;
    use rand::Rng;

    fn cloud(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = Seed::new(seed).rng();
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn summary_of_random_class() {
        let p = cloud(1, 30, 3);
        let g = build_class_graph(&p, 5, 0, (0..30).collect()).unwrap();
        let s = topology_summary(&g, &pairwise_distances(&p), &ImageConfig::default()).unwrap();
        assert!(s.max_scale > 0.0);
        assert!(s.l1_logdet_reduced.is_finite());
        assert_eq!(s.beta0, g.num_components());
        assert!(s.ph_h0.betti_auc > 0.0);
    }

    #[test]
    fn invariant_under_relabeling_and_rotation() {
        let p = cloud(2, 25, 3);
        let g = build_class_graph(&p, 4, 0, (0..25).collect()).unwrap();
        let base = topology_summary(&g, &pairwise_distances(&p), &ImageConfig::default()).unwrap();

        let perm: Vec<usize> = (0..25).rev().collect();
        let q = DMatrix::from_fn(25, 3, |i, j| p[(perm[i], j)]);
        let gq = build_class_graph(&q, 4, 0, (0..25).collect()).unwrap();
        let relabeled = topology_summary(&gq, &pairwise_distances(&q), &ImageConfig::default()).unwrap();
        assert_eq!(base.l1_nullity, relabeled.l1_nullity);
        assert_eq!(base.num_triangles, relabeled.num_triangles);
        assert!((base.l1_logdet_reduced - relabeled.l1_logdet_reduced).abs() < 1e-9);

        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let r = &p * rot;
        let gr = build_class_graph(&r, 4, 0, (0..25).collect()).unwrap();
        let rotated = topology_summary(&gr, &pairwise_distances(&r), &ImageConfig::default()).unwrap();
        assert_eq!(gr.edges, g.edges);
        assert!((base.l1_logdet_reduced - rotated.l1_logdet_reduced).abs() < 1e-9);
        assert!((base.ph_h1.betti_auc - rotated.ph_h1.betti_auc).abs() < 1e-9);
    }

    #[test]
    fn edgeless_graph_is_an_error() {
        let g = ClassGraph::unweighted(3, &[]).unwrap();
        let d = DMatrix::zeros(3, 3);
        assert!(matches!(
            topology_summary(&g, &d, &ImageConfig::default()),
            Err(Error::Edgeless)
        ));
    }
}
