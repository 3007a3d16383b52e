//! Ranking, selection and control-consistency reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::ssl::{score_unchecked, train_weights_with, Hyper, ScoreWeights, Terms, Vec5, ViewBatch};
use crate::views::ViewKind;

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub exact_p: bool,
}

/// Largest `n` for which the p-value is an exact permutation test.
pub const EXACT_P_MAX_N: usize = 8;

/// Spearman correlation with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("spearman needs n >= 3, got {n}")));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let rho = pearson(&rx, &ry).ok_or_else(|| Error::Undefined("spearman rho of a constant input".into()))?;
    let (p_value, exact_p) = if n <= EXACT_P_MAX_N {
        (permutation_p(&rx, &ry, rho), true)
    } else {
        (t_p(rho, n), false)
    };
    Ok(Spearman { rho, p_value, n, exact_p })
}

fn t_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
}

fn permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let mut perm = ry.to_vec();
    let mut hits = 0u64;
    let mut total = 0u64;
    heap_permutations(&mut perm, &mut |p| {
        total += 1;
        if pearson(rx, p).is_some_and(|r| r.abs() >= rho.abs() - 1e-12) {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

fn heap_permutations(a: &mut [f64], visit: &mut dyn FnMut(&[f64])) {
    let n = a.len();
    let mut c = vec![0usize; n];
    visit(a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            visit(a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected_index: usize,
    pub selected: f64,
    pub oracle: f64,
    pub gap: f64,
}

/// Picks the lowest score (lowest index on ties) and compares its accuracy
/// with the best accuracy in the family.
pub fn selection_metrics(scores: &[f64], ood_acc: &[f64]) -> Result<Selection> {
    select(scores, ood_acc, false)
}

/// Like [`selection_metrics`], optionally selecting the highest score.
pub fn select(scores: &[f64], ood_acc: &[f64], higher_is_better: bool) -> Result<Selection> {
    if scores.len() != ood_acc.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch {} scores vs {} accuracies",
            scores.len(),
            ood_acc.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty family".into()));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let better = if higher_is_better { scores[i] > scores[best] } else { scores[i] < scores[best] };
        if better {
            best = i;
        }
    }
    let oracle = ood_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Selection {
        selected_index: best,
        selected: ood_acc[best],
        oracle,
        gap: oracle - ood_acc[best],
    })
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub setting: String,
    pub score_name: String,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
    pub selected_accuracy: f64,
    pub oracle_accuracy: f64,
    pub gap: f64,
    pub score_std: f64,
    /// Selection per severity tag, when the family carries tags.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_severity: BTreeMap<String, Selection>,
}

pub fn ranking_report(
    setting: &str,
    score_name: &str,
    scores: &[f64],
    ood_acc: &[f64],
    higher_is_better: bool,
    severity: Option<&[String]>,
) -> Result<RankingReport> {
    let sel = select(scores, ood_acc, higher_is_better)?;
    let (rho, p_value) = match spearman(scores, ood_acc) {
        Ok(s) => (Some(s.rho), Some(s.p_value)),
        Err(Error::Undefined(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let mut per_severity = BTreeMap::new();
    if let Some(tags) = severity {
        if tags.len() != scores.len() {
            return Err(Error::InvalidInput("severity tags do not match the family".into()));
        }
        let mut groups: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
        for (i, t) in tags.iter().enumerate() {
            groups.entry(t).or_default().push(i);
        }
        for (tag, idx) in groups {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| ood_acc[i]).collect();
            per_severity.insert(tag.clone(), select(&s, &a, higher_is_better)?);
        }
    }
    Ok(RankingReport {
        setting: setting.into(),
        score_name: score_name.into(),
        rho,
        p_value,
        n: scores.len(),
        selected_accuracy: sel.selected,
        oracle_accuracy: sel.oracle,
        gap: sel.gap,
        score_std: population_std(scores),
        per_severity,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

/// `setting,score,rho,p,n,selected_acc,oracle_acc,gap,score_std`.
pub fn ranking_csv(reports: &[RankingReport]) -> String {
    let mut s = String::from("setting,score,rho,p,n,selected_acc,oracle_acc,gap,score_std\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.setting,
            r.score_name,
            opt(r.rho),
            opt(r.p_value),
            r.n,
            r.selected_accuracy,
            r.oracle_accuracy,
            r.gap,
            r.score_std
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub kind: String,
    pub mean_delta: f64,
    pub mean_abs_delta: f64,
    pub std_delta: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub rows: Vec<ControlRow>,
}

impl ControlReport {
    pub fn row(&self, kind: &str) -> Option<&ControlRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// `kind,mean_delta,mean_abs_delta,std_delta,n`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,mean_delta,mean_abs_delta,std_delta,n\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.kind, r.mean_delta, r.mean_abs_delta, r.std_delta, r.n).unwrap();
        }
        s
    }
}

/// Summarizes score deltas `s(view) - s(anchor)` per view kind, preceded by
/// an all-zero anchor row.
pub fn control_report(num_anchors: usize, deltas: &[(ViewKind, f64)]) -> ControlReport {
    let mut rows = vec![ControlRow {
        kind: "anchor".into(),
        mean_delta: 0.0,
        mean_abs_delta: 0.0,
        std_delta: 0.0,
        n: num_anchors,
    }];
    for kind in ViewKind::all() {
        let d: Vec<f64> = deltas.iter().filter(|(k, _)| *k == kind).map(|(_, v)| *v).collect();
        if d.is_empty() {
            continue;
        }
        let n = d.len() as f64;
        rows.push(ControlRow {
            kind: kind.name().into(),
            mean_delta: d.iter().sum::<f64>() / n,
            mean_abs_delta: d.iter().map(|v| v.abs()).sum::<f64>() / n,
            std_delta: population_std(&d),
            n: d.len(),
        });
    }
    ControlReport { rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoInvariance,
    NoSeparation,
    NoTopologyDefect,
    NoInteraction,
    NoMonotonicConstraint,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoInvariance,
        Ablation::NoSeparation,
        Ablation::NoTopologyDefect,
        Ablation::NoInteraction,
        Ablation::NoMonotonicConstraint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoInvariance => "no_invariance",
            Ablation::NoSeparation => "no_separation",
            Ablation::NoTopologyDefect => "no_topology_defect",
            Ablation::NoInteraction => "no_interaction",
            Ablation::NoMonotonicConstraint => "no_monotonic_constraint",
        }
    }

    fn zeroed(self) -> &'static [usize] {
        match self {
            Ablation::NoTopologyDefect => &[2, 4],
            Ablation::NoInteraction => &[4],
            _ => &[],
        }
    }

    fn terms(self) -> Terms {
        Terms {
            invariance: self != Ablation::NoInvariance,
            separation: self != Ablation::NoSeparation,
            project: self != Ablation::NoMonotonicConstraint,
        }
    }

    /// Applies the variant's feature mask to one vector.
    pub fn mask(self, g: &Vec5) -> Vec5 {
        let mut g = *g;
        for &i in self.zeroed() {
            g[i] = 0.0;
        }
        g
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Ablation,
    pub weights: ScoreWeights,
    pub report: RankingReport,
}

/// Retrains with one component removed and evaluates on the anchors of the
/// batch against their accuracies.
pub fn run_ablation(variant: Ablation, batch: &ViewBatch, hyper: &Hyper, ood_acc: &[f64], setting: &str) -> Result<AblationResult> {
    let masked = batch.mask(variant.zeroed());
    let weights = train_weights_with(&masked, hyper, variant.terms())?;
    let scores: Vec<f64> = masked.anchors.iter().map(|g| score_unchecked(&weights.w, g)).collect();
    let report = ranking_report(setting, variant.name(), &scores, ood_acc, false, None)?;
    Ok(AblationResult { variant, weights, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use crate::ssl::train_weights;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().rho, 1.0);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    /// Rank by counting: rank(x_i) = #{x_j < x_i} + (#{x_j == x_i} + 1) / 2.
    fn brute_rank(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&u| u < v).count() as f64;
                let equal = x.iter().filter(|&&u| u == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn tied_ranks_match_counting_definition() {
        let x = [1.0, 1.0, 2.0];
        let y = [1.0, 2.0, 3.0];
        assert_eq!(average_ranks(&x), brute_rank(&x));
        let (rx, ry) = (brute_rank(&x), brute_rank(&y));
        let mx = rx.iter().sum::<f64>() / 3.0;
        let my = ry.iter().sum::<f64>() / 3.0;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den = (rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>() * ry.iter().map(|b| (b - my).powi(2)).sum::<f64>()).sqrt();
        assert_abs_diff_eq!(spearman(&x, &y).unwrap().rho, num / den, epsilon = 1e-12);
        assert_abs_diff_eq!(num / den, 0.8660254037844387, epsilon = 1e-12);

        let mut rng = Seed::new(1).rng();
        for _ in 0..50 {
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(0..5) as f64).collect();
            assert_eq!(average_ranks(&v), brute_rank(&v));
        }
    }

    #[test]
    fn p_values() {
        // n = 3 perfect correlation: 2 of 6 permutations reach |rho| = 1.
        let s = spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(s.exact_p);
        assert_abs_diff_eq!(s.p_value, 2.0 / 6.0, epsilon = 1e-12);
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + if (*v as i64) % 3 == 0 { 5.0 } else { 0.0 }).collect();
        let s = spearman(&x, &y).unwrap();
        assert!(!s.exact_p);
        assert!(s.p_value > 0.0 && s.p_value < 1e-3);
        let anti: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &anti).unwrap().p_value, 0.0);
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let mut rng = Seed::new(2).rng();
        for _ in 0..50 {
            let n = rng.random_range(3..30);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
            let a = spearman(&x, &y).unwrap().rho;
            let b = spearman(&tx, &ty).unwrap().rho;
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            assert!(a.abs() <= 1.0);
            let s1 = selection_metrics(&x, &y).unwrap();
            let s2 = selection_metrics(&tx, &y).unwrap();
            assert_eq!(s1.selected_index, s2.selected_index);
        }
    }

    #[test]
    fn selection_examples() {
        let s = selection_metrics(&[2.0, 1.0, 3.0], &[0.8, 0.9, 0.7]).unwrap();
        assert_eq!((s.selected, s.oracle, s.gap), (0.9, 0.9, 0.0));
        let s = selection_metrics(&[1.0, 2.0, 3.0], &[0.7, 0.9, 0.8]).unwrap();
        assert_eq!((s.selected, s.oracle), (0.7, 0.9));
        assert_abs_diff_eq!(s.gap, 0.2, epsilon = 1e-12);
        let s = selection_metrics(&[1.0, 2.0, 1.0], &[0.5, 0.6, 0.9]).unwrap();
        assert_eq!(s.selected_index, 0);
        assert!(selection_metrics(&[1.0], &[0.5, 0.6]).is_err());
        let s = select(&[1.0, 2.0, 3.0], &[0.7, 0.9, 0.8], true).unwrap();
        assert_eq!(s.selected_index, 2);
    }

    #[test]
    fn report_with_severity() {
        let tags: Vec<String> = ["1", "1", "2", "2"].iter().map(|s| s.to_string()).collect();
        let r = ranking_report("A", "torsion_only", &[1.0, 2.0, 3.0, 0.5], &[0.9, 0.8, 0.7, 0.6], false, Some(&tags)).unwrap();
        assert_eq!(r.n, 4);
        assert!(r.gap >= 0.0);
        assert_eq!(r.per_severity["1"].gap, 0.0);
        assert_abs_diff_eq!(r.per_severity["2"].gap, 0.1, epsilon = 1e-12);
        let csv = ranking_csv(&[r]);
        assert!(csv.starts_with("setting,score,rho,p,n,selected_acc,oracle_acc,gap,score_std\n"));
        let flat = ranking_report("A", "x", &[1.0, 1.0, 1.0], &[0.1, 0.2, 0.3], false, None).unwrap();
        assert!(flat.rho.is_none());
    }

    #[test]
    fn control_rows() {
        let deltas = vec![
            (ViewKind::Rotate, 0.0),
            (ViewKind::Rotate, 0.0),
            (ViewKind::LabelShuffle, 1.0),
            (ViewKind::LabelShuffle, 3.0),
        ];
        let r = control_report(2, &deltas);
        let anchor = r.row("anchor").unwrap();
        assert_eq!((anchor.mean_delta, anchor.std_delta, anchor.n), (0.0, 0.0, 2));
        let ls = r.row("label_shuffle").unwrap();
        assert_eq!((ls.mean_delta, ls.mean_abs_delta, ls.std_delta, ls.n), (2.0, 2.0, 1.0, 2));
        assert!(r.row("rewire").is_none());
        assert!(r.to_csv().contains("\nanchor,0,0,0,2\n"));
    }

    fn toy_batch(seed: u64) -> (ViewBatch, Vec<f64>) {
        let mut rng = Seed::new(seed).rng();
        let anchors: Vec<Vec5> = (0..6).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let acc: Vec<f64> = anchors.iter().map(|g| 0.9 - 0.1 * g[0]).collect();
        let mut b = ViewBatch::new(anchors.clone());
        for i in 0..6 {
            b.add_positive(i, std::array::from_fn(|k| anchors[i][k] + rng.random_range(-0.05..0.05))).unwrap();
            b.add_negative(i, std::array::from_fn(|k| anchors[i][k] + if k == 0 { 1.0 } else { rng.random_range(-0.5..0.5) })).unwrap();
        }
        (b, acc)
    }

    #[test]
    fn ablation_variants() {
        let (batch, acc) = toy_batch(3);
        let h = Hyper::default();
        let full = run_ablation(Ablation::Full, &batch, &h, &acc, "toy").unwrap();
        let direct = train_weights(&batch, &h).unwrap();
        assert_eq!(full.weights.w, direct.w);
        assert_eq!(full.weights.trace_hash, direct.trace_hash);

        let topo = run_ablation(Ablation::NoTopologyDefect, &batch, &h, &acc, "toy").unwrap();
        let inter = run_ablation(Ablation::NoInteraction, &batch, &h, &acc, "toy").unwrap();
        // The masked coordinate only sees the ridge term.
        assert!(inter.weights.w[4] < h.init);
        assert!(topo.weights.w[2] < h.init && topo.weights.w[4] < h.init);
        assert!(topo.report.rho.is_some());

        // Without positives the separation-free objective is pure ridge.
        let mut no_pos = batch.clone();
        no_pos.positives.clear();
        let ns = run_ablation(Ablation::NoSeparation, &no_pos, &Hyper { mu: 1.0, ..h }, &acc, "toy").unwrap();
        assert!(ns.weights.w.iter().all(|&w| w < 1e-6));
        assert!(ns.report.score_std < 1e-6);

        // Negative separation directions can pull weights below zero.
        let mut neg = ViewBatch::new(vec![[0.0; 5]]);
        neg.add_negative(0, [-1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let nm = run_ablation(Ablation::NoMonotonicConstraint, &neg, &h, &[0.1], "toy");
        // A single anchor cannot be ranked; check the weights directly instead.
        assert!(nm.is_err());
        let w = train_weights_with(&neg, &h, Ablation::NoMonotonicConstraint.terms()).unwrap();
        assert!(w.w[0] < 0.0);

        assert!("no_such".parse::<Ablation>().is_err());
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }
}
