//! Bottleneck distance between persistence diagrams.

use super::persistence::PersistenceDiagram;

/// Bottleneck distance with the L∞ ground metric and diagonal matching.
///
/// Essential classes are matched among themselves by sorted birth; differing
/// essential counts give infinity.
pub fn bottleneck_distance(a: &PersistenceDiagram, b: &PersistenceDiagram) -> f64 {
    if a.essential.len() != b.essential.len() {
        return f64::INFINITY;
    }
    let essential = a
        .essential
        .iter()
        .zip(&b.essential)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    essential.max(finite_bottleneck(&a.pairs, &b.pairs))
}

fn linf(p: (f64, f64), q: (f64, f64)) -> f64 {
    (p.0 - q.0).abs().max((p.1 - q.1).abs())
}

fn to_diagonal(p: (f64, f64)) -> f64 {
    (p.1 - p.0) / 2.0
}

/// Bottleneck distance between finite point sets.
pub fn finite_bottleneck(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut candidates: Vec<f64> = a.iter().chain(b).map(|&p| to_diagonal(p)).collect();
    for &p in a {
        for &q in b {
            candidates.push(linf(p, q));
        }
    }
    candidates.push(0.0);
    candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());
    candidates.dedup();

    let (mut lo, mut hi) = (0, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if has_perfect_matching(a, b, candidates[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    candidates[lo]
}

/// Left side: points of `a` then diagonal copies of `b`.
/// Right side: points of `b` then diagonal copies of `a`.
fn has_perfect_matching(a: &[(f64, f64)], b: &[(f64, f64)], delta: f64) -> bool {
    let (n, m) = (a.len(), b.len());
    let size = n + m;
    let adjacent = |l: usize, r: usize| -> bool {
        match (l < n, r < m) {
            (true, true) => linf(a[l], b[r]) <= delta,
            (true, false) => r - m == l && to_diagonal(a[l]) <= delta,
            (false, true) => l - n == r && to_diagonal(b[r]) <= delta,
            (false, false) => true,
        }
    };
    let mut match_right = vec![usize::MAX; size];
    for l in 0..size {
        let mut seen = vec![false; size];
        if !augment(l, &adjacent, &mut match_right, &mut seen) {
            return false;
        }
    }
    true
}

fn augment(
    l: usize,
    adjacent: &dyn Fn(usize, usize) -> bool,
    match_right: &mut [usize],
    seen: &mut [bool],
) -> bool {
    for r in 0..match_right.len() {
        if seen[r] || !adjacent(l, r) {
            continue;
        }
        seen[r] = true;
        if match_right[r] == usize::MAX || augment(match_right[r], adjacent, match_right, seen) {
            match_right[r] = l;
            return true;
        }
    }
    false
}
