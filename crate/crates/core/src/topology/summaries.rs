//! Vectorizations of persistence diagrams.

use serde::{Deserialize, Serialize};

use super::persistence::PersistenceDiagram;
use crate::error::{Error, Result};

/// Persistence image grid settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    pub resolution: usize,
    /// Gaussian bandwidth as a fraction of `max_scale`.
    pub bandwidth: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            resolution: 20,
            bandwidth: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhSummary {
    pub betti_auc: f64,
    pub total_persistence: f64,
    pub persistent_entropy: f64,
    pub persistence_image_l2: f64,
}

/// Bars clipped to `[0, max_scale]`; essential classes die at `max_scale`.
pub fn clipped_bars(d: &PersistenceDiagram, max_scale: f64) -> Vec<(f64, f64)> {
    d.pairs
        .iter()
        .copied()
        .chain(d.essential.iter().map(|&b| (b, max_scale)))
        .map(|(b, e)| (b.min(max_scale), e.min(max_scale)))
        .filter(|(b, e)| e > b)
        .collect()
}

/// Summary statistics of one diagram over `[0, max_scale]`.
///
/// The Betti curve is a step function, so its integral is the summed
/// clipped bar length.
pub fn ph_summaries(d: &PersistenceDiagram, max_scale: f64, image: &ImageConfig) -> Result<PhSummary> {
    if !max_scale.is_finite() || max_scale < 0.0 {
        return Err(Error::InvalidInput(format!("max_scale must be finite, got {max_scale}")));
    }
    let bars = clipped_bars(d, max_scale);
    if bars.is_empty() {
        return Ok(PhSummary::default());
    }
    let lengths: Vec<f64> = bars.iter().map(|(b, e)| e - b).collect();
    let total: f64 = lengths.iter().sum();
    let entropy = -lengths
        .iter()
        .map(|&l| {
            let p = l / total;
            if p > 0.0 { p * p.ln() } else { 0.0 }
        })
        .sum::<f64>();
    Ok(PhSummary {
        betti_auc: total,
        total_persistence: total,
        persistent_entropy: entropy.max(0.0),
        persistence_image_l2: persistence_image(&bars, max_scale, image)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt(),
    })
}

/// Row-major `resolution x resolution` image over birth x persistence in
/// `[0, max_scale]^2`, weighted by `persistence / max_scale`.
pub fn persistence_image(bars: &[(f64, f64)], max_scale: f64, cfg: &ImageConfig) -> Vec<f64> {
    let r = cfg.resolution;
    let mut img = vec![0.0; r * r];
    if max_scale <= 0.0 {
        return img;
    }
    let sigma = cfg.bandwidth * max_scale;
    let pixel = max_scale / r as f64;
    let norm = pixel * pixel / (2.0 * std::f64::consts::PI * sigma * sigma);
    for &(b, e) in bars {
        let p = e - b;
        let w = p / max_scale;
        for i in 0..r {
            let cy = (i as f64 + 0.5) * pixel;
            let gy = (-(cy - p).powi(2) / (2.0 * sigma * sigma)).exp();
            for j in 0..r {
                let cx = (j as f64 + 0.5) * pixel;
                let gx = (-(cx - b).powi(2) / (2.0 * sigma * sigma)).exp();
                img[i * r + j] += w * norm * gx * gy;
            }
        }
    }
    img
}
