//! Per-checkpoint feature aggregation, family z-normalization and the score
//! input vector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{mean_curvature, CurvatureConfig};
use crate::error::{Error, Result};
use crate::graph::{build_class_graph_from_distances, pairwise_distances, ClassGraph};
use crate::ingest::EmbeddingDataset;
use crate::spectral::SpectralSummary;
use crate::topology::{topology_summary, ImageConfig, TopologySummary};

pub const TORSION: &str = "torsion";
pub const MEAN_KAPPA: &str = "mean_kappa";

/// Topology channels, in export order.
pub const TOPOLOGY_CHANNELS: [&str; 12] = [
    "l1_logdet_reduced",
    "l1_spectral_entropy",
    "beta1",
    "num_triangles",
    "ph_betti_auc_h0",
    "ph_betti_auc_h1",
    "ph_total_persistence_h0",
    "ph_total_persistence_h1",
    "ph_entropy_h0",
    "ph_entropy_h1",
    "ph_pi_l2_h0",
    "ph_pi_l2_h1",
];

pub const DEFAULT_OMEGA: [&str; 5] = [
    "l1_logdet_reduced",
    "l1_spectral_entropy",
    "beta1",
    "ph_betti_auc_h1",
    "ph_pi_l2_h0",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub k: usize,
    pub curvature: CurvatureConfig,
    pub image: ImageConfig,
    /// Topology channels averaged into the topology-defect channel.
    pub omega_components: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            k: 10,
            curvature: CurvatureConfig::default(),
            image: ImageConfig::default(),
            omega_components: DEFAULT_OMEGA.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl FeatureConfig {
    pub fn with_k(k: usize) -> Self {
        FeatureConfig {
            k,
            ..Default::default()
        }
    }
}

fn topology_channels(t: &TopologySummary) -> [f64; 12] {
    [
        t.l1_logdet_reduced,
        t.l1_spectral_entropy,
        t.l1_nullity as f64,
        t.num_triangles as f64,
        t.ph_h0.betti_auc,
        t.ph_h1.betti_auc,
        t.ph_h0.total_persistence,
        t.ph_h1.total_persistence,
        t.ph_h0.persistent_entropy,
        t.ph_h1.persistent_entropy,
        t.ph_h0.persistence_image_l2,
        t.ph_h1.persistence_image_l2,
    ]
}

/// Signals of one class; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatures {
    pub class_id: usize,
    pub num_nodes: usize,
    pub isolated_nodes: usize,
    pub torsion: Option<f64>,
    pub mean_kappa: Option<f64>,
    pub topology: Option<TopologySummary>,
    pub markers: Vec<String>,
}

impl ClassFeatures {
    fn undefined(class_id: usize, num_nodes: usize, why: String) -> Self {
        ClassFeatures {
            class_id,
            num_nodes,
            isolated_nodes: 0,
            torsion: None,
            mean_kappa: None,
            topology: None,
            markers: vec![why],
        }
    }
}

/// Class signals from a prebuilt graph. `dist` holds distances between the
/// class points in node order and drives the persistence branch.
pub fn class_features_from_graph(
    g: &ClassGraph,
    dist: &DMatrix<f64>,
    cfg: &FeatureConfig,
) -> Result<ClassFeatures> {
    let (compact, isolated) = g.without_isolated();
    let mut out = ClassFeatures {
        class_id: g.class_id,
        num_nodes: g.num_nodes(),
        isolated_nodes: isolated,
        torsion: None,
        mean_kappa: None,
        topology: None,
        markers: Vec::new(),
    };
    if compact.num_nodes() < g.k + 2 {
        out.markers.push(format!(
            "torsion: {} nodes after isolation removal, need {}",
            compact.num_nodes(),
            g.k + 2
        ));
    } else {
        out.torsion = Some(SpectralSummary::of_graph(&compact)?.logdet_reduced);
    }
    match mean_curvature(&compact, &cfg.curvature) {
        Ok(s) => out.mean_kappa = Some(s.mean_kappa),
        Err(e @ (Error::Edgeless | Error::Undefined(_))) => out.markers.push(format!("kappa: {e}")),
        Err(e) => return Err(e),
    }
    match topology_summary(g, dist, &cfg.image) {
        Ok(t) => out.topology = Some(t),
        Err(e @ (Error::Edgeless | Error::Undefined(_))) => {
            out.markers.push(format!("topology: {e}"))
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Builds the class graph from `points` and computes its signals.
pub fn class_features(points: &DMatrix<f64>, class_id: usize, cfg: &FeatureConfig) -> Result<ClassFeatures> {
    let n = points.nrows();
    if n < cfg.k + 2 {
        return Ok(ClassFeatures::undefined(
            class_id,
            n,
            format!("class has {n} points, need {}", cfg.k + 2),
        ));
    }
    let dist = pairwise_distances(points);
    let g = build_class_graph_from_distances(&dist, cfg.k, class_id, (0..n).collect())?;
    class_features_from_graph(&g, &dist, cfg)
}

/// Class-averaged raw channels of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub checkpoint_id: String,
    pub channels: BTreeMap<String, f64>,
    /// Classes skipped per channel group (`torsion`, `kappa`, `topology`).
    pub excluded: BTreeMap<String, usize>,
    pub classes: Vec<ClassFeatures>,
}

impl RawFeatures {
    pub fn get(&self, name: &str) -> Result<f64> {
        self.channels
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown channel {name}")))
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Averages class signals per channel, skipping undefined classes.
pub fn aggregate_classes(checkpoint_id: &str, classes: Vec<ClassFeatures>) -> Result<RawFeatures> {
    let torsion: Vec<f64> = classes.iter().filter_map(|c| c.torsion).collect();
    let kappa: Vec<f64> = classes.iter().filter_map(|c| c.mean_kappa).collect();
    let topo: Vec<[f64; 12]> = classes
        .iter()
        .filter_map(|c| c.topology.as_ref().map(topology_channels))
        .collect();
    let missing = |what: &str| {
        Error::Undefined(format!(
            "{checkpoint_id}: every class is degenerate for {what}"
        ))
    };
    let mut channels = BTreeMap::new();
    channels.insert(TORSION.to_string(), mean(&torsion).ok_or_else(|| missing(TORSION))?);
    channels.insert(MEAN_KAPPA.to_string(), mean(&kappa).ok_or_else(|| missing(MEAN_KAPPA))?);
    if topo.is_empty() {
        return Err(missing("topology"));
    }
    for (c, name) in TOPOLOGY_CHANNELS.iter().enumerate() {
        let col: Vec<f64> = topo.iter().map(|t| t[c]).collect();
        channels.insert(name.to_string(), mean(&col).unwrap());
    }
    let n = classes.len();
    let excluded = BTreeMap::from([
        ("torsion".to_string(), n - torsion.len()),
        ("kappa".to_string(), n - kappa.len()),
        ("topology".to_string(), n - topo.len()),
    ]);
    Ok(RawFeatures {
        checkpoint_id: checkpoint_id.to_string(),
        channels,
        excluded,
        classes,
    })
}

/// Raw features of one checkpoint; classes are processed in parallel.
pub fn checkpoint_raw_features(ds: &EmbeddingDataset, cfg: &FeatureConfig) -> Result<RawFeatures> {
    let classes = (0..ds.num_classes)
        .into_par_iter()
        .map(|c| class_features(&ds.class_points(c), c, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate_classes(&ds.checkpoint_id, classes)
}

/// Raw features from per-class graphs plus the class distance matrices used
/// for persistence.
pub fn raw_features_from_graphs(
    checkpoint_id: &str,
    graphs: &[(ClassGraph, DMatrix<f64>)],
    cfg: &FeatureConfig,
) -> Result<RawFeatures> {
    let classes = graphs
        .par_iter()
        .map(|(g, d)| class_features_from_graph(g, d, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate_classes(checkpoint_id, classes)
}

/// Mean and population standard deviation of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

/// Relative spread below which a channel counts as constant.
const CONSTANT_TOL: f64 = 1e-12;

impl ChannelStats {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(
                "z-normalization needs at least two checkpoints".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value {v}")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        Ok(ChannelStats {
            mean,
            std,
            constant: std <= CONSTANT_TOL * scale,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }
}

/// Population z-scores; the flag reports a constant channel (all zeros).
pub fn z_normalize_family(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    let s = ChannelStats::fit(values)?;
    Ok((values.iter().map(|&v| s.apply(v)).collect(), s.constant))
}

/// Unweighted mean of z-scored topology channels.
pub fn compose_z_omega(channels: &[f64]) -> Result<f64> {
    mean(channels).ok_or_else(|| Error::InvalidInput("no topology channels selected".into()))
}

/// `[z_T, -z_kappa, z_Omega, |z_T + z_kappa|, z_Omega * |z_T + z_kappa|]`.
pub fn assemble_g(z_t: f64, z_kappa: f64, z_omega: f64) -> Result<[f64; 5]> {
    if !(z_t.is_finite() && z_kappa.is_finite() && z_omega.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite z input ({z_t}, {z_kappa}, {z_omega})"
        )));
    }
    let gap = (z_t + z_kappa).abs();
    Ok([z_t, -z_kappa, z_omega, gap, z_omega * gap])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFeatures {
    pub raw: RawFeatures,
    /// z-score of every raw channel.
    pub z: BTreeMap<String, f64>,
    pub z_t: f64,
    pub z_kappa: f64,
    pub z_omega: f64,
    pub delta_gl: f64,
    pub g: [f64; 5],
}

/// Channel statistics fit on one checkpoint family; applying it to other
/// datasets (views) reuses the family's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyNormalizer {
    pub channels: BTreeMap<String, ChannelStats>,
    pub omega_components: Vec<String>,
    /// Statistics of the averaged topology channel, re-standardized so the
    /// composite has unit spread like the other channels.
    pub omega: ChannelStats,
    pub std_convention: String,
}

impl FamilyNormalizer {
    pub fn fit(raws: &[RawFeatures], omega_components: &[String]) -> Result<Self> {
        let first = raws
            .first()
            .ok_or_else(|| Error::InvalidInput("empty family".into()))?;
        let mut channels = BTreeMap::new();
        for name in first.channels.keys() {
            let values = raws.iter().map(|r| r.get(name)).collect::<Result<Vec<_>>>()?;
            channels.insert(name.clone(), ChannelStats::fit(&values)?);
        }
        let mut norm = FamilyNormalizer {
            channels,
            omega_components: omega_components.to_vec(),
            omega: ChannelStats {
                mean: 0.0,
                std: 1.0,
                constant: false,
            },
            std_convention: "population".into(),
        };
        let omegas = raws
            .iter()
            .map(|r| norm.omega_mean(r))
            .collect::<Result<Vec<_>>>()?;
        norm.omega = ChannelStats::fit(&omegas)?;
        Ok(norm)
    }

    fn z_of(&self, raw: &RawFeatures, name: &str) -> Result<f64> {
        let stats = self
            .channels
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown channel {name}")))?;
        Ok(stats.apply(raw.get(name)?))
    }

    fn omega_mean(&self, raw: &RawFeatures) -> Result<f64> {
        let zs = self
            .omega_components
            .iter()
            .map(|c| self.z_of(raw, c))
            .collect::<Result<Vec<_>>>()?;
        compose_z_omega(&zs)
    }

    pub fn transform(&self, raw: &RawFeatures) -> Result<CheckpointFeatures> {
        let z = self
            .channels
            .keys()
            .map(|name| Ok((name.clone(), self.z_of(raw, name)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let z_t = z[TORSION];
        let z_kappa = z[MEAN_KAPPA];
        let z_omega = self.omega.apply(self.omega_mean(raw)?);
        let g = assemble_g(z_t, z_kappa, z_omega)?;
        Ok(CheckpointFeatures {
            raw: raw.clone(),
            z,
            z_t,
            z_kappa,
            z_omega,
            delta_gl: g[3],
            g,
        })
    }
}

/// Fits the family normalizer and transforms every checkpoint.
pub fn family_features(
    raws: &[RawFeatures],
    omega_components: &[String],
) -> Result<(FamilyNormalizer, Vec<CheckpointFeatures>)> {
    let norm = FamilyNormalizer::fit(raws, omega_components)?;
    let feats = raws.iter().map(|r| norm.transform(r)).collect::<Result<Vec<_>>>()?;
    Ok((norm, feats))
}

/// One row per checkpoint: raw channels, z-channels, `delta_gl`, `g0..g4`.
pub fn feature_csv(features: &[CheckpointFeatures]) -> String {
    let mut s = String::new();
    let Some(first) = features.first() else {
        return s;
    };
    let raw_names: Vec<&String> = first.raw.channels.keys().collect();
    s.push_str("checkpoint_id");
    for n in &raw_names {
        write!(s, ",{n}").unwrap();
    }
    for n in &raw_names {
        write!(s, ",z_{n}").unwrap();
    }
    s.push_str(",z_omega,delta_gl,g0,g1,g2,g3,g4\n");
    for f in features {
        s.push_str(&f.raw.checkpoint_id);
        for n in &raw_names {
            write!(s, ",{}", f.raw.channels[*n]).unwrap();
        }
        for n in &raw_names {
            write!(s, ",{}", f.z[*n]).unwrap();
        }
        write!(s, ",{},{}", f.z_omega, f.delta_gl).unwrap();
        for v in f.g {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_feature_csv(features: &[CheckpointFeatures], path: &Path) -> Result<()> {
    crate::cache::atomic_write(path, feature_csv(features).as_bytes())
}
