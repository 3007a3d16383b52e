//! Synthetic checkpoint families with a known accuracy ordering.
//!
//! Each class is an anisotropic Gaussian around its own mean on the sphere.
//! Along the family the spectrum of each class flattens: the leading axis
//! keeps its scale while the trailing axes grow, so classes become higher
//! dimensional and more diffuse, and the signal-to-spread separation between
//! class means falls. All checkpoints embed the same underlying samples (the
//! standard-normal coordinates are drawn once), as checkpoints of one model
//! embed the same inputs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::ingest::{CheckpointFamily, EmbeddingDataset};
use crate::rng::{Rng, Seed};
use crate::views::random_orthogonal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Class spectra flatten across checkpoints.
    SeparationSweep,
    /// Fixed geometry; a growing fraction of labels is reassigned at random.
    NoiseSweep,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::SeparationSweep => "separation_sweep",
            Profile::NoiseSweep => "noise_sweep",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separation_sweep" => Ok(Profile::SeparationSweep),
            "noise_sweep" => Ok(Profile::NoiseSweep),
            _ => Err(Error::InvalidInput(format!(
                "unknown profile {s:?} (expected separation_sweep or noise_sweep)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_checkpoints: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation along the leading axis of every class.
    pub leading_scale: f64,
    /// Ratio between consecutive axis scales at the first and last checkpoint.
    pub decay_range: (f64, f64),
    /// Label reassignment fraction at the first and last checkpoint (noise_sweep).
    pub flip_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_checkpoints: 8,
            num_classes: 4,
            dim: 16,
            per_class: 50,
            leading_scale: 0.3,
            decay_range: (0.2, 0.9),
            flip_range: (0.0, 0.35),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth: {m}")));
        if self.num_checkpoints < 2 {
            return bad("need at least 2 checkpoints");
        }
        if self.num_classes < 2 || self.per_class < 2 {
            return bad("need at least 2 classes with 2 points each");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        let (lo, hi) = self.decay_range;
        if !(lo > 0.0 && hi > lo && hi < 1.0) {
            return bad("decay_range must satisfy 0 < lo < hi < 1");
        }
        let (a, b) = self.flip_range;
        if !(0.0..1.0).contains(&a) || !(a..1.0).contains(&b) || b <= a {
            return bad("flip_range must satisfy 0 <= lo < hi < 1");
        }
        if !(self.leading_scale > 0.0 && self.leading_scale.is_finite()) {
            return bad("leading_scale must be positive");
        }
        Ok(())
    }

    fn lerp(&self, (a, b): (f64, f64), t: usize) -> f64 {
        a + (b - a) * t as f64 / (self.num_checkpoints - 1) as f64
    }
}

struct ClassGeometry {
    means: Vec<Vec<f64>>,
    bases: Vec<DMatrix<f64>>,
    min_spacing: f64,
}

fn geometry(cfg: &SynthConfig, rng: &mut Rng) -> ClassGeometry {
    let q = random_orthogonal(cfg.dim, rng);
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| (0..cfg.dim).map(|j| q[(j, c % cfg.dim)]).collect())
        .collect();
    let bases = (0..cfg.num_classes).map(|_| random_orthogonal(cfg.dim, rng)).collect();
    let mut min_spacing = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            min_spacing = min_spacing.min(d);
        }
    }
    ClassGeometry { means, bases, min_spacing }
}

/// Axis scales `leading * decay^l`.
fn axis_scales(cfg: &SynthConfig, decay: f64) -> Vec<f64> {
    (0..cfg.dim).map(|l| cfg.leading_scale * decay.powi(l as i32)).collect()
}

/// Standard-normal coordinates, one row per sample, shared by all checkpoints.
fn latent(cfg: &SynthConfig, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(cfg.num_classes * cfg.per_class, cfg.dim, |_, _| rng.sample(StandardNormal))
}

fn embed(cfg: &SynthConfig, geo: &ClassGeometry, z: &DMatrix<f64>, scales: &[f64]) -> (DMatrix<f64>, Vec<usize>) {
    let n = cfg.num_classes * cfg.per_class;
    let mut points = DMatrix::zeros(n, cfg.dim);
    let labels: Vec<usize> = (0..n).map(|row| row / cfg.per_class).collect();
    for (row, &c) in labels.iter().enumerate() {
        for j in 0..cfg.dim {
            let offset: f64 = (0..cfg.dim).map(|l| geo.bases[c][(j, l)] * scales[l] * z[(row, l)]).sum();
            points[(row, j)] = geo.means[c][j] + offset;
        }
    }
    (points, labels)
}

fn spread(scales: &[f64]) -> f64 {
    scales.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Accuracy as a monotone function of signal-to-noise separation.
fn accuracy_from_separation(sep: f64, num_classes: usize) -> f64 {
    let chance = 1.0 / num_classes as f64;
    chance + (1.0 - chance) * (sep / 8.0).tanh()
}

/// Generates a family; ood_accuracy strictly decreases along the family.
pub fn generate(profile: Profile, cfg: &SynthConfig) -> Result<CheckpointFamily> {
    cfg.validate()?;
    let root = Seed::new(cfg.seed).child(profile.name());
    let geo = geometry(cfg, &mut root.child("geometry").rng());
    let z = latent(cfg, &mut root.child("samples").rng());
    let mut checkpoints = Vec::with_capacity(cfg.num_checkpoints);
    let mut ood = Vec::with_capacity(cfg.num_checkpoints);
    let mut separations = Vec::with_capacity(cfg.num_checkpoints);
    let mut levels = Vec::with_capacity(cfg.num_checkpoints);
    for t in 0..cfg.num_checkpoints {
        let mut rng = root.child("checkpoint").index(t as u64).rng();
        let id = format!("ckpt_{t:02}");
        let (points, mut labels, sep, level) = match profile {
            Profile::SeparationSweep => {
                let decay = cfg.lerp(cfg.decay_range, t);
                let scales = axis_scales(cfg, decay);
                let (p, l) = embed(cfg, &geo, &z, &scales);
                (p, l, geo.min_spacing / spread(&scales), decay)
            }
            Profile::NoiseSweep => {
                let scales = axis_scales(cfg, cfg.decay_range.0);
                let (p, l) = embed(cfg, &geo, &z, &scales);
                let flip = cfg.lerp(cfg.flip_range, t);
                (p, l, geo.min_spacing / spread(&scales) * (1.0 - flip), flip)
            }
        };
        if profile == Profile::NoiseSweep {
            let n = labels.len();
            let flips = (level * n as f64).round() as usize;
            for idx in rand::seq::index::sample(&mut rng, n, flips) {
                labels[idx] = (labels[idx] + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
            }
        }
        checkpoints.push(EmbeddingDataset::new(id, points, labels, cfg.num_classes)?);
        ood.push(accuracy_from_separation(sep, cfg.num_classes));
        separations.push(sep);
        levels.push(level);
    }
    let family = CheckpointFamily {
        family_id: format!("{}_seed{}", profile.name(), cfg.seed),
        checkpoints,
        ood_accuracy: Some(ood),
        num_classes: cfg.num_classes,
        metadata: Some(json!({
            "profile": profile.name(),
            "separations": separations,
            "levels": levels,
            "config": cfg,
        })),
    };
    family.validate()?;
    Ok(family)
}
