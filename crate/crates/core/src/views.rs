//! Positive (geometry-preserving) and negative (structure-breaking) views of
//! a checkpoint's source embeddings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{checkpoint_raw_features, raw_features_from_graphs, FeatureConfig, RawFeatures};
use crate::graph::{build_class_graph_from_distances, knn_margin_from_distances, pairwise_distances, weight_lipschitz, ClassGraph};
use crate::ingest::{normalize_rows, select_rows, EmbeddingDataset};
use crate::rng::{Rng, Seed};
use crate::spectral::{eigenvalues_sym, log_pseudo_det, ZERO_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Rotate,
    GaussNoise,
    Bootstrap,
    FeatureDropout,
    PcaPreserving,
    LabelShuffle,
    FeatureShuffle,
    Rewire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl ViewKind {
    pub const POSITIVE: [ViewKind; 5] = [
        ViewKind::Rotate,
        ViewKind::GaussNoise,
        ViewKind::Bootstrap,
        ViewKind::FeatureDropout,
        ViewKind::PcaPreserving,
    ];
    pub const NEGATIVE: [ViewKind; 3] = [ViewKind::LabelShuffle, ViewKind::FeatureShuffle, ViewKind::Rewire];

    pub fn all() -> impl Iterator<Item = ViewKind> {
        Self::POSITIVE.into_iter().chain(Self::NEGATIVE)
    }

    pub fn polarity(self) -> Polarity {
        if Self::POSITIVE.contains(&self) {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Rotate => "rotate",
            ViewKind::GaussNoise => "gauss_noise",
            ViewKind::Bootstrap => "bootstrap",
            ViewKind::FeatureDropout => "feature_dropout",
            ViewKind::PcaPreserving => "pca_preserving",
            ViewKind::LabelShuffle => "label_shuffle",
            ViewKind::FeatureShuffle => "feature_shuffle",
            ViewKind::Rewire => "rewire",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ViewKind::all()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown view kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewParams {
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub pca_variance: f64,
    /// Double-edge swap attempts per edge.
    pub swaps_per_edge: usize,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            noise_sigma: 0.01,
            dropout_rate: 0.1,
            pca_variance: 0.95,
            swaps_per_edge: 10,
        }
    }
}

impl ViewParams {
    fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise sigma {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidInput(format!("dropout rate {}", self.dropout_rate)));
        }
        if !(self.pca_variance > 0.0 && self.pca_variance <= 1.0) {
            return Err(Error::InvalidInput(format!("pca variance {}", self.pca_variance)));
        }
        Ok(())
    }
}

/// A rewired class graph together with the class distances used for the
/// persistence branch.
#[derive(Debug, Clone, PartialEq)]
pub struct RewiredClass {
    pub graph: ClassGraph,
    pub dist: DMatrix<f64>,
    pub swaps: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViewPayload {
    Dataset(EmbeddingDataset),
    Graphs(Vec<RewiredClass>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewInstance {
    pub anchor_id: String,
    pub kind: ViewKind,
    pub polarity: Polarity,
    pub seed: u64,
    pub params: ViewParams,
    pub payload: ViewPayload,
    pub markers: Vec<String>,
}

impl ViewInstance {
    pub fn record(&self) -> ViewRecord {
        ViewRecord {
            anchor_id: self.anchor_id.clone(),
            kind: self.kind,
            polarity: self.polarity,
            seed: self.seed,
            params: self.params,
        }
    }

    pub fn dataset(&self) -> Option<&EmbeddingDataset> {
        match &self.payload {
            ViewPayload::Dataset(d) => Some(d),
            ViewPayload::Graphs(_) => None,
        }
    }

    /// Raw features of the view under `cfg`.
    pub fn raw_features(&self, cfg: &FeatureConfig) -> Result<RawFeatures> {
        match &self.payload {
            ViewPayload::Dataset(d) => checkpoint_raw_features(d, cfg),
            ViewPayload::Graphs(classes) => {
                let pairs: Vec<(ClassGraph, DMatrix<f64>)> =
                    classes.iter().map(|c| (c.graph.clone(), c.dist.clone())).collect();
                raw_features_from_graphs(&self.anchor_id, &pairs, cfg)
            }
        }
    }
}

/// Uniformly random orthogonal matrix (QR of a Gaussian matrix with the
/// diagonal of R made positive).
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Right-multiplies every embedding by `q`.
pub fn rotate_with(ds: &EmbeddingDataset, q: &DMatrix<f64>) -> Result<EmbeddingDataset> {
    if q.nrows() != ds.dim() || q.ncols() != ds.dim() {
        return Err(Error::InvalidInput("rotation has wrong shape".into()));
    }
    EmbeddingDataset::from_normalized(ds.checkpoint_id.clone(), &ds.points * q, ds.labels.clone(), ds.num_classes)
}

fn with_points(ds: &EmbeddingDataset, points: DMatrix<f64>) -> Result<EmbeddingDataset> {
    EmbeddingDataset::from_normalized(ds.checkpoint_id.clone(), points, ds.labels.clone(), ds.num_classes)
}

fn gauss_noise(ds: &EmbeddingDataset, sigma: f64, rng: &mut Rng) -> Result<EmbeddingDataset> {
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let noisy = ds.points.map(|x| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        x + sigma * z
    });
    with_points(ds, normalize_rows(&noisy)?)
}

fn bootstrap(ds: &EmbeddingDataset, rng: &mut Rng) -> Result<EmbeddingDataset> {
    let mut rows = Vec::with_capacity(ds.len());
    for c in 0..ds.num_classes {
        let idx = ds.class_indices(c);
        rows.extend((0..idx.len()).map(|_| idx[rng.random_range(0..idx.len())]));
    }
    EmbeddingDataset::from_normalized(
        ds.checkpoint_id.clone(),
        select_rows(&ds.points, &rows),
        rows.iter().map(|&r| ds.labels[r]).collect(),
        ds.num_classes,
    )
}

fn feature_dropout(ds: &EmbeddingDataset, rate: f64, rng: &mut Rng) -> Result<EmbeddingDataset> {
    for _ in 0..1000 {
        let keep: Vec<bool> = (0..ds.dim()).map(|_| !rng.random_bool(rate)).collect();
        let mut pts = ds.points.clone();
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                pts.column_mut(j).fill(0.0);
            }
        }
        if let Ok(p) = normalize_rows(&pts) {
            return with_points(ds, p);
        }
    }
    Err(Error::InvalidInput("feature dropout kept zeroing rows".into()))
}

/// Projects onto the leading principal directions holding `fraction` of the
/// variance (global fit), then renormalizes rows.
pub fn pca_preserving(ds: &EmbeddingDataset, fraction: f64) -> Result<EmbeddingDataset> {
    let n = ds.len() as f64;
    let mean = ds.points.row_mean();
    let centered = DMatrix::from_fn(ds.len(), ds.dim(), |i, j| ds.points[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..ds.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        kept.push(i);
        acc += eig.eigenvalues[i].max(0.0);
        if acc >= fraction * total {
            break;
        }
    }
    let basis = DMatrix::from_fn(ds.dim(), kept.len(), |r, c| eig.eigenvectors[(r, kept[c])]);
    let projected = &centered * &basis * basis.transpose();
    let back = DMatrix::from_fn(ds.len(), ds.dim(), |i, j| projected[(i, j)] + mean[j]);
    with_points(ds, normalize_rows(&back)?)
}

fn label_shuffle(ds: &EmbeddingDataset, rng: &mut Rng) -> Result<EmbeddingDataset> {
    if ds.labels.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("label shuffle needs at least two labels".into()));
    }
    let mut labels = ds.labels.clone();
    loop {
        labels.shuffle(rng);
        if labels != ds.labels {
            break;
        }
    }
    EmbeddingDataset::from_normalized(ds.checkpoint_id.clone(), ds.points.clone(), labels, ds.num_classes)
}

fn feature_shuffle(ds: &EmbeddingDataset, rng: &mut Rng) -> Result<EmbeddingDataset> {
    if ds.len() < 2 {
        return Err(Error::InvalidInput("feature shuffle needs at least two rows".into()));
    }
    loop {
        let mut pts = ds.points.clone();
        let mut identity = true;
        for j in 0..ds.dim() {
            let mut perm: Vec<usize> = (0..ds.len()).collect();
            perm.shuffle(rng);
            identity &= perm.iter().enumerate().all(|(i, &p)| i == p);
            for (i, &p) in perm.iter().enumerate() {
                pts[(i, j)] = ds.points[(p, j)];
            }
        }
        if !identity {
            return with_points(ds, pts);
        }
    }
}

/// Double-edge swaps on one graph. Each swap replaces `(a,b),(c,d)` by
/// `(a,d),(c,b)`; weights and lengths move with the edge slot. Swaps that
/// would create a loop or a duplicate edge are rejected.
pub fn rewire_graph(g: &ClassGraph, attempts: usize, rng: &mut Rng) -> Result<(ClassGraph, usize)> {
    let m = g.num_edges();
    if m < 2 {
        return Err(Error::InvalidInput(format!("class {} has {m} edges; cannot rewire", g.class_id)));
    }
    let mut edges = g.edges.clone();
    let mut present: std::collections::HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut done = 0;
    for _ in 0..attempts {
        let e = rng.random_range(0..m);
        let f = rng.random_range(0..m);
        if e == f {
            continue;
        }
        let (a, b) = edges[e];
        let (mut c, mut d) = edges[f];
        if rng.random_bool(0.5) {
            std::mem::swap(&mut c, &mut d);
        }
        let ne = (a.min(d), a.max(d));
        let nf = (c.min(b), c.max(b));
        if a == d || c == b || ne == nf || present.contains(&ne) || present.contains(&nf) {
            continue;
        }
        present.remove(&edges[e]);
        present.remove(&edges[f]);
        present.insert(ne);
        present.insert(nf);
        edges[e] = ne;
        edges[f] = nf;
        done += 1;
    }
    let g2 = ClassGraph::from_edges(
        g.class_id,
        g.node_ids.clone(),
        edges,
        g.weights.clone(),
        g.lengths.clone(),
        g.k,
        g.sigma.clone(),
    )?;
    Ok((g2, done))
}

fn rewire(ds: &EmbeddingDataset, k: usize, swaps_per_edge: usize, seed: Seed) -> Result<(Vec<RewiredClass>, Vec<String>)> {
    let mut classes = Vec::with_capacity(ds.num_classes);
    let mut markers = Vec::new();
    for c in 0..ds.num_classes {
        let pts = ds.class_points(c);
        let n = pts.nrows();
        let dist = pairwise_distances(&pts);
        if n < k + 2 {
            markers.push(format!("class {c}: {n} points, not rewired"));
            let graph = ClassGraph::from_edges(c, (0..n).collect(), vec![], vec![], vec![], k, vec![0.0; n])?;
            classes.push(RewiredClass { graph, dist, swaps: 0, skipped: true });
            continue;
        }
        let graph = build_class_graph_from_distances(&dist, k, c, (0..n).collect())?;
        if graph.num_edges() < 2 {
            markers.push(format!("class {c}: fewer than 2 edges, not rewired"));
            classes.push(RewiredClass { graph, dist, swaps: 0, skipped: true });
            continue;
        }
        let mut rng = seed.index(c as u64).rng();
        let (graph, swaps) = rewire_graph(&graph, swaps_per_edge * graph.num_edges(), &mut rng)?;
        classes.push(RewiredClass { graph, dist, swaps, skipped: false });
    }
    Ok((classes, markers))
}

fn instance(ds: &EmbeddingDataset, kind: ViewKind, params: &ViewParams, seed: Seed, payload: ViewPayload) -> ViewInstance {
    ViewInstance {
        anchor_id: ds.checkpoint_id.clone(),
        kind,
        polarity: kind.polarity(),
        seed: seed.0,
        params: *params,
        payload,
        markers: Vec::new(),
    }
}

pub fn apply_positive_view(ds: &EmbeddingDataset, kind: ViewKind, params: &ViewParams, seed: Seed) -> Result<ViewInstance> {
    if kind.polarity() != Polarity::Positive {
        return Err(Error::InvalidInput(format!("{kind} is not a positive view")));
    }
    params.validate()?;
    let mut rng = seed.rng();
    let out = match kind {
        ViewKind::Rotate => rotate_with(ds, &random_orthogonal(ds.dim(), &mut rng))?,
        ViewKind::GaussNoise => gauss_noise(ds, params.noise_sigma, &mut rng)?,
        ViewKind::Bootstrap => bootstrap(ds, &mut rng)?,
        ViewKind::FeatureDropout => feature_dropout(ds, params.dropout_rate, &mut rng)?,
        ViewKind::PcaPreserving => pca_preserving(ds, params.pca_variance)?,
        _ => unreachable!(),
    };
    Ok(instance(ds, kind, params, seed, ViewPayload::Dataset(out)))
}

/// Negative view; `k` is the graph parameter used by `rewire`.
pub fn apply_negative_view(
    ds: &EmbeddingDataset,
    kind: ViewKind,
    params: &ViewParams,
    seed: Seed,
    k: usize,
) -> Result<ViewInstance> {
    if kind.polarity() != Polarity::Negative {
        return Err(Error::InvalidInput(format!("{kind} is not a negative view")));
    }
    params.validate()?;
    let mut rng = seed.rng();
    match kind {
        ViewKind::LabelShuffle => Ok(instance(ds, kind, params, seed, ViewPayload::Dataset(label_shuffle(ds, &mut rng)?))),
        ViewKind::FeatureShuffle => Ok(instance(ds, kind, params, seed, ViewPayload::Dataset(feature_shuffle(ds, &mut rng)?))),
        ViewKind::Rewire => {
            let (classes, markers) = rewire(ds, k, params.swaps_per_edge, seed)?;
            let mut v = instance(ds, kind, params, seed, ViewPayload::Graphs(classes));
            v.markers = markers;
            Ok(v)
        }
        _ => unreachable!(),
    }
}

pub fn apply_view(ds: &EmbeddingDataset, kind: ViewKind, params: &ViewParams, seed: Seed, k: usize) -> Result<ViewInstance> {
    match kind.polarity() {
        Polarity::Positive => apply_positive_view(ds, kind, params, seed),
        Polarity::Negative => apply_negative_view(ds, kind, params, seed, k),
    }
}

/// Number of views per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewCounts {
    pub per_positive_kind: usize,
    pub per_negative_kind: usize,
    pub positive_kinds: Vec<ViewKind>,
    pub negative_kinds: Vec<ViewKind>,
}

impl Default for ViewCounts {
    fn default() -> Self {
        ViewCounts {
            per_positive_kind: 2,
            per_negative_kind: 2,
            positive_kinds: ViewKind::POSITIVE.to_vec(),
            negative_kinds: ViewKind::NEGATIVE.to_vec(),
        }
    }
}

impl ViewCounts {
    /// `(kind, replicate)` pairs in a fixed order.
    pub fn plan(&self) -> Vec<(ViewKind, usize)> {
        let pos = self.positive_kinds.iter().flat_map(|&k| (0..self.per_positive_kind).map(move |i| (k, i)));
        let neg = self.negative_kinds.iter().flat_map(|&k| (0..self.per_negative_kind).map(move |i| (k, i)));
        pos.chain(neg).collect()
    }
}

/// Seed of replicate `i` of `kind` for an anchor.
pub fn view_seed(anchor: Seed, kind: ViewKind, i: usize) -> Seed {
    anchor.child(kind.name()).index(i as u64)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub anchor_id: String,
    pub kind: ViewKind,
    pub polarity: Polarity,
    pub seed: u64,
    pub params: ViewParams,
}

pub fn write_view_manifest(records: &[ViewRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::cache::atomic_write(path, &buf)
}

/// Edge-set certificate for a positive view with a fixed vertex correspondence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// False when the view changes the vertex set (bootstrap, shuffles, rewire).
    pub covered: bool,
    pub note: Option<String>,
    /// Largest pairwise-distance distortion within any class.
    pub eta: f64,
    /// Smallest kNN margin over classes.
    pub gamma_k: f64,
    /// `2 eta < gamma_k` in every class.
    pub certified: bool,
    /// Every class's mutual kNN edge set is unchanged.
    pub edges_identical: bool,
}

pub fn margin_certificate(anchor: &EmbeddingDataset, view: &ViewInstance, k: usize) -> Result<MarginReport> {
    let not_covered = |why: &str| MarginReport {
        covered: false,
        note: Some(why.to_string()),
        eta: f64::NAN,
        gamma_k: f64::NAN,
        certified: false,
        edges_identical: false,
    };
    let other = match (&view.kind, view.dataset()) {
        (ViewKind::Bootstrap, _) => {
            return Ok(not_covered("not covered: bootstrap changes the vertex set"));
        }
        (_, Some(d)) if view.polarity == Polarity::Positive => d,
        _ => return Ok(not_covered("not covered: only positive views with fixed vertices")),
    };
    if other.len() != anchor.len() || other.labels != anchor.labels {
        return Ok(not_covered("not covered: vertex correspondence lost"));
    }
    let mut eta: f64 = 0.0;
    let mut gamma = f64::INFINITY;
    let mut certified = true;
    let mut identical = true;
    for c in 0..anchor.num_classes {
        let (a, b) = (anchor.class_points(c), other.class_points(c));
        if a.nrows() < k + 2 {
            continue;
        }
        let (da, db) = (pairwise_distances(&a), pairwise_distances(&b));
        let eta_c = (&da - &db).amax();
        let gamma_c = knn_margin_from_distances(&da, k)?;
        eta = eta.max(eta_c);
        gamma = gamma.min(gamma_c);
        certified &= 2.0 * eta_c < gamma_c;
        let ga = build_class_graph_from_distances(&da, k, c, vec![0; a.nrows()])?;
        let gb = build_class_graph_from_distances(&db, k, c, vec![0; b.nrows()])?;
        identical &= ga.edges == gb.edges;
    }
    Ok(MarginReport {
        covered: true,
        note: None,
        eta,
        gamma_k: gamma,
        certified,
        edges_identical: identical,
    })
}

/// Torsion stability bound `2 p0 C_L eta / a0` for a graph without isolated
/// nodes, or `None` when `eta` violates the side conditions
/// (`eta <= sigma_min/2`, `k C_w eta <= d_min/2`, `C_L eta <= a0/2`).
pub fn torsion_stability_bound(g: &ClassGraph, eta: f64) -> Result<Option<f64>> {
    let eigs = eigenvalues_sym(&g.normalized_laplacian()?)?;
    let positive: Vec<f64> = eigs.iter().copied().filter(|&x| x > ZERO_TOL).collect();
    let (a0, p0) = (positive.first().copied().unwrap_or(0.0), positive.len() as f64);
    let sigma_min = g.sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let d_min = g.degrees.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = g.degrees.iter().copied().fold(0.0, f64::max);
    let max_len = g.lengths.iter().copied().fold(0.0, f64::max);
    let k = g.k as f64;
    let c_w = weight_lipschitz(max_len, eta, sigma_min);
    let c_l = k * c_w * (2.0 / d_min + (2.0 + 2f64.sqrt()) * d_max / (d_min * d_min));
    let ok = eta <= sigma_min / 2.0 && k * c_w * eta <= d_min / 2.0 && c_l * eta <= a0 / 2.0 && a0 > 0.0;
    Ok(ok.then(|| 2.0 * p0 * c_l * eta / a0))
}

/// `log det*` of the normalized Laplacian of `g`.
pub fn torsion_of(g: &ClassGraph) -> Result<f64> {
    Ok(log_pseudo_det(&eigenvalues_sym(&g.normalized_laplacian()?)?, ZERO_TOL)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dataset(seed: u64, per_class: usize, classes: usize, d: usize) -> EmbeddingDataset {
        let mut rng = Seed::new(seed).rng();
        let n = per_class * classes;
        let pts = DMatrix::from_fn(n, d, |i, j| {
            let center = if j == i / per_class { 3.0 } else { 0.0 };
            {
                let z: f64 = StandardNormal.sample(&mut rng);
                center + 0.5 * z
            }
        });
        let labels = (0..n).map(|i| i / per_class).collect();
        EmbeddingDataset::new("anchor", pts, labels, classes).unwrap()
    }

    fn payload(v: &ViewInstance) -> &EmbeddingDataset {
        v.dataset().unwrap()
    }

    #[test]
    fn polarity_mapping() {
        for k in ViewKind::POSITIVE {
            assert_eq!(k.polarity(), Polarity::Positive);
        }
        for k in ViewKind::NEGATIVE {
            assert_eq!(k.polarity(), Polarity::Negative);
        }
        for k in ViewKind::all() {
            assert_eq!(k.name().parse::<ViewKind>().unwrap(), k);
        }
        assert!("shear".parse::<ViewKind>().is_err());
        let ds = dataset(1, 10, 2, 4);
        let p = ViewParams::default();
        assert!(apply_positive_view(&ds, ViewKind::LabelShuffle, &p, Seed::new(1)).is_err());
        assert!(apply_negative_view(&ds, ViewKind::Rotate, &p, Seed::new(1), 3).is_err());
    }

    #[test]
    fn identity_rotation_and_zero_noise_are_no_ops() {
        let ds = dataset(2, 10, 2, 4);
        assert_eq!(rotate_with(&ds, &DMatrix::identity(4, 4)).unwrap(), ds);
        let p = ViewParams {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let v = apply_positive_view(&ds, ViewKind::GaussNoise, &p, Seed::new(3)).unwrap();
        assert_eq!(payload(&v), &ds);
    }

    #[test]
    fn random_rotation_is_orthogonal() {
        let mut rng = Seed::new(4).rng();
        let q = random_orthogonal(6, &mut rng);
        assert!((q.transpose() * &q - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn positive_views_keep_unit_rows_and_labels() {
        let ds = dataset(5, 12, 3, 6);
        for kind in ViewKind::POSITIVE {
            let v = apply_positive_view(&ds, kind, &ViewParams::default(), Seed::new(6)).unwrap();
            let out = payload(&v);
            assert_eq!(out.len(), ds.len());
            for i in 0..out.len() {
                assert_abs_diff_eq!(out.points.row(i).norm(), 1.0, epsilon = 1e-12);
            }
            let mut counts = vec![0; 3];
            out.labels.iter().for_each(|&l| counts[l] += 1);
            assert_eq!(counts, vec![12; 3], "{kind}");
        }
    }

    #[test]
    fn pca_with_full_variance_is_identity() {
        let ds = dataset(7, 10, 2, 5);
        let out = pca_preserving(&ds, 1.0).unwrap();
        assert!((&out.points - &ds.points).amax() < 1e-10);
    }

    #[test]
    fn label_shuffle_preserves_point_multiset_and_mixes_classes() {
        let ds = dataset(8, 15, 2, 4);
        let mut mixed = 0;
        for s in 0..20 {
            let v = apply_negative_view(&ds, ViewKind::LabelShuffle, &ViewParams::default(), Seed::new(s), 3).unwrap();
            let out = payload(&v);
            assert_eq!(out.points, ds.points);
            assert_ne!(out.labels, ds.labels);
            let mut sorted = out.labels.clone();
            sorted.sort();
            assert_eq!(sorted, ds.labels);
            // Class 0 of the view draws points from both original classes.
            let from_one = out.class_indices(0).iter().filter(|&&i| ds.labels[i] == 1).count();
            if from_one > 0 && from_one < 15 {
                mixed += 1;
            }
        }
        assert!(mixed >= 18);
    }

    #[test]
    fn feature_shuffle_preserves_column_marginals() {
        let base = dataset(9, 8, 2, 3);
        // Duplicated rank-one columns.
        let col: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let pts = DMatrix::from_fn(16, 3, |i, _| col[i]);
        let ds = EmbeddingDataset::from_normalized("x", pts, base.labels.clone(), 2).unwrap();
        let v = apply_negative_view(&ds, ViewKind::FeatureShuffle, &ViewParams::default(), Seed::new(1), 3).unwrap();
        let out = payload(&v);
        for j in 0..3 {
            let mut a: Vec<f64> = out.points.column(j).iter().copied().collect();
            a.sort_by(f64::total_cmp);
            assert_eq!(a, col);
        }
        assert_ne!(out.points, ds.points);
    }

    #[test]
    fn rewire_preserves_edge_count_and_degree_counts() {
        let ds = dataset(10, 20, 2, 5);
        let v = apply_negative_view(&ds, ViewKind::Rewire, &ViewParams::default(), Seed::new(2), 4).unwrap();
        let ViewPayload::Graphs(classes) = &v.payload else { panic!() };
        for (c, rc) in classes.iter().enumerate() {
            let pts = ds.class_points(c);
            let g = build_class_graph_from_distances(&pairwise_distances(&pts), 4, c, (0..20).collect()).unwrap();
            assert_eq!(rc.graph.num_edges(), g.num_edges());
            let count = |g: &ClassGraph| {
                let mut d = vec![0usize; g.num_nodes()];
                for &(a, b) in &g.edges {
                    d[a] += 1;
                    d[b] += 1;
                }
                d
            };
            assert_eq!(count(&rc.graph), count(&g));
            assert!(rc.swaps > 0);
            assert_ne!(rc.graph.edges, g.edges);
        }
    }

    #[test]
    fn rewire_skips_tiny_graphs() {
        let g = ClassGraph::unweighted(3, &[(0, 1)]).unwrap();
        let mut rng = Seed::new(1).rng();
        assert!(rewire_graph(&g, 10, &mut rng).is_err());
        let ds = dataset(11, 4, 2, 3);
        let v = apply_negative_view(&ds, ViewKind::Rewire, &ViewParams::default(), Seed::new(2), 3).unwrap();
        assert_eq!(v.markers.len(), 2);
    }

    #[test]
    fn views_are_deterministic() {
        let ds = dataset(12, 10, 2, 4);
        for kind in ViewKind::all() {
            let a = apply_view(&ds, kind, &ViewParams::default(), Seed::new(3), 3).unwrap();
            let b = apply_view(&ds, kind, &ViewParams::default(), Seed::new(3), 3).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn certificate_for_rotation_and_bootstrap() {
        let ds = dataset(13, 15, 2, 4);
        let p = ViewParams::default();
        let rot = apply_positive_view(&ds, ViewKind::Rotate, &p, Seed::new(1)).unwrap();
        let r = margin_certificate(&ds, &rot, 4).unwrap();
        assert!(r.covered && r.certified && r.edges_identical);
        assert!(r.eta < 1e-12);
        let boot = apply_positive_view(&ds, ViewKind::Bootstrap, &p, Seed::new(1)).unwrap();
        let r = margin_certificate(&ds, &boot, 4).unwrap();
        assert!(!r.covered);
        assert!(r.note.unwrap().contains("bootstrap"));
    }

    #[test]
    fn noise_sweep_certificates() {
        let ds = dataset(14, 15, 2, 4);
        let mut certified_seen = false;
        let mut failed_seen = false;
        for sigma in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 0.3] {
            let p = ViewParams {
                noise_sigma: sigma,
                ..Default::default()
            };
            let v = apply_positive_view(&ds, ViewKind::GaussNoise, &p, Seed::new(2)).unwrap();
            let r = margin_certificate(&ds, &v, 4).unwrap();
            if r.certified {
                certified_seen = true;
                assert!(r.edges_identical, "sigma {sigma}");
            } else {
                failed_seen = true;
            }
        }
        assert!(certified_seen && failed_seen);
    }

    #[test]
    fn manifest_lines() {
        let ds = dataset(15, 5, 2, 3);
        let v = apply_positive_view(&ds, ViewKind::Rotate, &ViewParams::default(), Seed::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("views.jsonl");
        write_view_manifest(&[v.record(), v.record()], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: ViewRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, v.record());
        assert!(text.contains("\"kind\":\"rotate\""));
    }

    #[test]
    fn plan_order() {
        let plan = ViewCounts::default().plan();
        assert_eq!(plan.len(), 16);
        assert_eq!(plan[0], (ViewKind::Rotate, 0));
        assert_eq!(plan[15], (ViewKind::Rewire, 1));
    }
}
