//! Non-negative linear scorer trained with an invariance/separation
//! objective by projected subgradient descent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::sha256_hex;
use crate::error::{Error, Result};

pub type Vec5 = [f64; 5];

fn dot(a: &Vec5, b: &Vec5) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &Vec5) -> f64 {
    dot(a, a)
}

fn sub(a: &Vec5, b: &Vec5) -> Vec5 {
    std::array::from_fn(|i| a[i] - b[i])
}

/// `w^T g`, lower is better. Rejects negative weights.
pub fn score(w: &Vec5, g: &Vec5) -> Result<f64> {
    if let Some(x) = w.iter().find(|&&x| x < 0.0) {
        return Err(Error::InvalidInput(format!("negative score weight {x}")));
    }
    Ok(dot(w, g))
}

/// `w^T g` without the sign check (used by the unconstrained ablation).
pub fn score_unchecked(w: &Vec5, g: &Vec5) -> f64 {
    dot(w, g)
}

pub fn project_nonneg(w: &Vec5) -> Vec5 {
    w.map(|x| x.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub lambda: f64,
    pub margin: f64,
    pub mu: f64,
    pub steps: usize,
    pub step_size: f64,
    pub init: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lambda: 1.0,
            margin: 0.5,
            mu: 1e-3,
            steps: 1500,
            step_size: 0.01,
            init: 0.2,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.margin > 0.0) || !(self.mu > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::InvalidInput(format!(
                "need lambda >= 0, margin > 0, mu > 0, step > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Anchors with their positive and negative views, as feature vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewBatch {
    pub anchors: Vec<Vec5>,
    pub positives: Vec<(usize, Vec5)>,
    pub negatives: Vec<(usize, Vec5)>,
}

impl ViewBatch {
    pub fn new(anchors: Vec<Vec5>) -> Self {
        ViewBatch {
            anchors,
            ..Default::default()
        }
    }

    fn check(&self, anchor: usize) -> Result<()> {
        if anchor >= self.anchors.len() {
            return Err(Error::InvalidInput(format!("anchor {anchor} out of range")));
        }
        Ok(())
    }

    pub fn add_positive(&mut self, anchor: usize, g: Vec5) -> Result<()> {
        self.check(anchor)?;
        self.positives.push((anchor, g));
        Ok(())
    }

    pub fn add_negative(&mut self, anchor: usize, g: Vec5) -> Result<()> {
        self.check(anchor)?;
        self.negatives.push((anchor, g));
        Ok(())
    }

    /// `a = g - g+` per positive pair.
    pub fn a(&self) -> Vec<Vec5> {
        self.positives.iter().map(|(i, p)| sub(&self.anchors[*i], p)).collect()
    }

    /// `b = g- - g` per negative pair.
    pub fn b(&self) -> Vec<Vec5> {
        self.negatives.iter().map(|(i, n)| sub(n, &self.anchors[*i])).collect()
    }

    /// Largest Euclidean norm over every stored vector.
    pub fn max_norm(&self) -> f64 {
        self.anchors
            .iter()
            .chain(self.positives.iter().map(|p| &p.1))
            .chain(self.negatives.iter().map(|n| &n.1))
            .map(|g| norm_sq(g).sqrt())
            .fold(0.0, f64::max)
    }

    /// Copy with the given coordinates zeroed in every vector.
    pub fn mask(&self, zeroed: &[usize]) -> ViewBatch {
        let m = |g: &Vec5| {
            let mut g = *g;
            zeroed.iter().for_each(|&i| g[i] = 0.0);
            g
        };
        ViewBatch {
            anchors: self.anchors.iter().map(m).collect(),
            positives: self.positives.iter().map(|(i, g)| (*i, m(g))).collect(),
            negatives: self.negatives.iter().map(|(i, g)| (*i, m(g))).collect(),
        }
    }
}

/// Which objective terms are active and whether iterates are projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub invariance: bool,
    pub separation: bool,
    pub project: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            invariance: true,
            separation: true,
            project: true,
        }
    }
}

/// Differences `a`, `b` precomputed once for repeated evaluation.
struct Pairs {
    a: Vec<Vec5>,
    b: Vec<Vec5>,
}

impl Pairs {
    fn of(batch: &ViewBatch) -> Self {
        Pairs {
            a: batch.a(),
            b: batch.b(),
        }
    }

    fn objective(&self, w: &Vec5, h: &Hyper, t: Terms) -> f64 {
        let mut j = h.mu * norm_sq(w);
        if t.invariance && !self.a.is_empty() {
            j += self.a.iter().map(|a| dot(w, a).powi(2)).sum::<f64>() / self.a.len() as f64;
        }
        if t.separation && !self.b.is_empty() {
            let hinge: f64 = self.b.iter().map(|b| (h.margin - dot(w, b)).max(0.0)).sum();
            j += h.lambda * hinge / self.b.len() as f64;
        }
        j
    }

    fn subgradient(&self, w: &Vec5, h: &Hyper, t: Terms) -> Vec5 {
        let mut g = w.map(|x| 2.0 * h.mu * x);
        if t.invariance && !self.a.is_empty() {
            let s = 2.0 / self.a.len() as f64;
            for a in &self.a {
                let c = s * dot(w, a);
                for i in 0..5 {
                    g[i] += c * a[i];
                }
            }
        }
        if t.separation && !self.b.is_empty() {
            let s = h.lambda / self.b.len() as f64;
            for b in &self.b {
                // At the kink (w^T b == m) the inactive branch is taken.
                if dot(w, b) < h.margin {
                    for i in 0..5 {
                        g[i] -= s * b[i];
                    }
                }
            }
        }
        g
    }
}

/// `(1/M+) sum (w^T a)^2 + (lambda/M-) sum [m - w^T b]_+ + mu |w|^2`.
pub fn objective(w: &Vec5, batch: &ViewBatch, h: &Hyper) -> f64 {
    objective_with(w, batch, h, Terms::default())
}

pub fn objective_with(w: &Vec5, batch: &ViewBatch, h: &Hyper, terms: Terms) -> f64 {
    if batch.positives.is_empty() && batch.negatives.is_empty() {
        log::warn!("objective evaluated on a batch without view pairs");
    }
    Pairs::of(batch).objective(w, h, terms)
}

pub fn subgradient(w: &Vec5, batch: &ViewBatch, h: &Hyper) -> Vec5 {
    Pairs::of(batch).subgradient(w, h, Terms::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Variant {
    TorsionOnly,
    /// Raw mean-curvature z-score, higher is better; not a non-negative score.
    RicciOnly,
    FixedGeoscore { alpha: f64 },
    TopologyAwareFixed { alpha: f64, beta: f64, gamma: f64 },
    Learned,
}

impl Variant {
    pub const NAMES: [&'static str; 5] = ["torsion_only", "ricci_only", "fixed_geoscore", "topology_aware_fixed", "learned"];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::TorsionOnly => "torsion_only",
            Variant::RicciOnly => "ricci_only",
            Variant::FixedGeoscore { .. } => "fixed_geoscore",
            Variant::TopologyAwareFixed { .. } => "topology_aware_fixed",
            Variant::Learned => "learned",
        }
    }

    pub fn fixed_geoscore() -> Self {
        Variant::FixedGeoscore { alpha: 0.5 }
    }

    pub fn topology_aware_fixed() -> Self {
        Variant::TopologyAwareFixed {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }

    /// Weights of a fixed variant; `None` for `learned` and `ricci_only`.
    pub fn fixed_weights(&self) -> Option<Vec5> {
        match *self {
            Variant::TorsionOnly => Some([1.0, 0.0, 0.0, 0.0, 0.0]),
            Variant::FixedGeoscore { alpha } => Some([alpha, 1.0 - alpha, 0.0, 0.0, 0.0]),
            Variant::TopologyAwareFixed { alpha, beta, gamma } => Some([alpha, beta, gamma, 0.0, 0.0]),
            Variant::RicciOnly | Variant::Learned => None,
        }
    }

    /// Lower-is-better score of a feature vector; `ricci_only` returns the
    /// raw curvature z-score (`-g[1]`), which is higher-is-better.
    pub fn evaluate(&self, w: Option<&Vec5>, g: &Vec5) -> Result<f64> {
        match self {
            Variant::RicciOnly => Ok(-g[1]),
            Variant::Learned => {
                let w = w.ok_or_else(|| Error::InvalidInput("learned variant needs weights".into()))?;
                score(w, g)
            }
            fixed => score(&fixed.fixed_weights().unwrap(), g),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Variant::RicciOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "torsion_only" => Variant::TorsionOnly,
            "ricci_only" => Variant::RicciOnly,
            "fixed_geoscore" => Variant::fixed_geoscore(),
            "topology_aware_fixed" => Variant::topology_aware_fixed(),
            "learned" => Variant::Learned,
            _ => return Err(Error::InvalidInput(format!("unknown score variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w: Vec5,
    pub hyper: Hyper,
    pub variant: Variant,
    /// Best objective reached; `None` for fixed variants.
    pub objective_final: Option<f64>,
    /// SHA-256 of the little-endian objective trace.
    pub trace_hash: String,
    pub terms: Terms,
    pub kink_rule: String,
    #[serde(default, skip_serializing)]
    pub trace: Vec<f64>,
}

impl ScoreWeights {
    /// Weights for a fixed variant (no training).
    pub fn fixed(variant: Variant) -> Result<Self> {
        let w = variant
            .fixed_weights()
            .ok_or_else(|| Error::InvalidInput(format!("{variant} has no fixed weights")))?;
        Ok(ScoreWeights {
            w,
            hyper: Hyper::default(),
            variant,
            objective_final: None,
            trace_hash: String::new(),
            terms: Terms::default(),
            kink_rule: "inactive".into(),
            trace: Vec::new(),
        })
    }

    pub fn score(&self, g: &Vec5) -> Result<f64> {
        if self.terms.project {
            score(&self.w, g)
        } else {
            Ok(score_unchecked(&self.w, g))
        }
    }
}

fn trace_hash(trace: &[f64]) -> String {
    let bytes: Vec<u8> = trace.iter().flat_map(|x| x.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub fn train_weights(batch: &ViewBatch, h: &Hyper) -> Result<ScoreWeights> {
    train_weights_with(batch, h, Terms::default())
}

/// Projected subgradient descent from `init * 1`. The trace holds the
/// objective at the start and after every step; the best iterate is returned.
pub fn train_weights_with(batch: &ViewBatch, h: &Hyper, terms: Terms) -> Result<ScoreWeights> {
    h.validate()?;
    if batch.anchors.is_empty() {
        return Err(Error::InvalidInput("empty view batch".into()));
    }
    let pairs = Pairs::of(batch);
    let mut w = [h.init; 5];
    if terms.project {
        w = project_nonneg(&w);
    }
    let initial = pairs.objective(&w, h, terms);
    let mut trace = Vec::with_capacity(h.steps + 1);
    trace.push(initial);
    let (mut best_w, mut best) = (w, initial);
    for _ in 0..h.steps {
        let g = pairs.subgradient(&w, h, terms);
        let mut next: Vec5 = std::array::from_fn(|i| w[i] - h.step_size * g[i]);
        if terms.project {
            next = project_nonneg(&next);
        }
        w = next;
        let j = pairs.objective(&w, h, terms);
        if !j.is_finite() || j > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged { initial, current: j });
        }
        trace.push(j);
        if j < best {
            best = j;
            best_w = w;
        }
    }
    Ok(ScoreWeights {
        w: best_w,
        hyper: *h,
        variant: Variant::Learned,
        objective_final: Some(best),
        trace_hash: trace_hash(&trace),
        terms,
        kink_rule: "inactive".into(),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub total: f64,
}

/// Uniform deviation bound between empirical and population objectives for
/// `|w| <= r` and feature norms at most `b`.
pub fn generalization_bound(
    m_plus: usize,
    m_minus: usize,
    b: f64,
    r: f64,
    margin: f64,
    lambda: f64,
    delta: f64,
) -> Result<Bound> {
    if m_plus == 0 || m_minus == 0 {
        return Err(Error::InvalidInput("pair counts must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) || !(b >= 0.0) || !(r >= 0.0) || !(lambda >= 0.0) || !(margin > 0.0) {
        return Err(Error::InvalidInput("bound parameters out of domain".into()));
    }
    let (mp, mm) = (m_plus as f64, m_minus as f64);
    let log_term = (4.0 / delta).ln();
    let br = b * r;
    let eps_plus = 16.0 * br * br / mp.sqrt() + 4.0 * br * br * (log_term / (2.0 * mp)).sqrt();
    let eps_minus = 4.0 * br / mm.sqrt() + (margin + 2.0 * br) * (log_term / (2.0 * mm)).sqrt();
    Ok(Bound {
        eps_plus,
        eps_minus,
        total: eps_plus + lambda * eps_minus,
    })
}
