//! Discrete optimal transport between two histograms.
//!
//! [`w1_exact`] solves the transportation LP with the transportation simplex
//! (northwest-corner start, MODI potentials, cycle pivots on the basis tree).
//! [`w1_sinkhorn`] runs log-domain Sinkhorn iterations and returns the
//! transport cost of the entropic plan.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-9;
/// Masses below this are dropped from the support.
const SUPPORT_EPS: f64 = 1e-15;

fn check_inputs(mu: &[f64], nu: &[f64], cost: &DMatrix<f64>) -> Result<()> {
    if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
        return Err(Error::InvalidInput(format!(
            "cost is {}x{}, masses are {} and {}",
            cost.nrows(),
            cost.ncols(),
            mu.len(),
            nu.len()
        )));
    }
    if mu.iter().chain(nu).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput("masses must be finite and non-negative".into()));
    }
    let gap = (mu.iter().sum::<f64>() - nu.iter().sum::<f64>()).abs();
    if gap > MASS_TOL {
        return Err(Error::MassMismatch(gap));
    }
    Ok(())
}

fn support(m: &[f64]) -> Vec<usize> {
    (0..m.len()).filter(|&i| m[i] > SUPPORT_EPS).collect()
}

/// Exact W1 (or any linear transport cost) by the transportation simplex.
pub fn w1_exact(mu: &[f64], nu: &[f64], cost: &DMatrix<f64>) -> Result<f64> {
    check_inputs(mu, nu, cost)?;
    let rows = support(mu);
    let cols = support(nu);
    if rows.is_empty() || cols.is_empty() {
        return Ok(0.0);
    }
    let supply: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let mut demand: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    // Absorb the (tolerated) imbalance into the last demand.
    let gap = supply.iter().sum::<f64>() - demand.iter().sum::<f64>();
    *demand.last_mut().unwrap() += gap;
    let c = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])]);
    let plan = TransportSimplex::solve(&supply, &demand, &c)?;
    Ok(plan.cost)
}

struct TransportSimplex {
    cost: f64,
}

impl TransportSimplex {
    fn solve(supply: &[f64], demand: &[f64], c: &DMatrix<f64>) -> Result<Self> {
        let m = supply.len();
        let n = demand.len();
        let mut flow = DMatrix::<f64>::zeros(m, n);
        let mut basic = vec![false; m * n];
        let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);

        // Northwest corner: a staircase spanning tree of m+n-1 cells.
        let (mut ra, mut rb) = (supply.to_vec(), demand.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra[i].min(rb[j]).max(0.0);
            flow[(i, j)] = x;
            basic[i * n + j] = true;
            basis.push((i, j));
            ra[i] -= x;
            rb[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }

        let scale = c.amax().max(1.0);
        let tol = 1e-12 * scale;
        let max_iter = 50 * (m + n) * (m + n) + 100;
        let mut degenerate_streak = 0usize;

        for _ in 0..max_iter {
            let (u, v) = potentials(m, n, &basis, c);
            // Dantzig pricing, falling back to Bland's rule on long degenerate runs.
            let bland = degenerate_streak > m + n;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..m {
                for j in 0..n {
                    if basic[i * n + j] {
                        continue;
                    }
                    let r = c[(i, j)] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                let cost = (0..m)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| flow[(i, j)] * c[(i, j)])
                    .sum();
                return Ok(TransportSimplex { cost });
            };

            let path = tree_path(m, n, &basis, ei, ej);
            // path alternates -, +, -, ... starting from the cell at row ei.
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (pos, &b) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    let (bi, bj) = basis[b];
                    if flow[(bi, bj)] < theta {
                        theta = flow[(bi, bj)];
                        leave = b;
                    }
                }
            }
            let theta = theta.max(0.0);
            degenerate_streak = if theta <= SUPPORT_EPS { degenerate_streak + 1 } else { 0 };
            for (pos, &b) in path.iter().enumerate() {
                let (bi, bj) = basis[b];
                if pos % 2 == 0 {
                    flow[(bi, bj)] = (flow[(bi, bj)] - theta).max(0.0);
                } else {
                    flow[(bi, bj)] += theta;
                }
            }
            flow[(ei, ej)] = theta;
            let (li, lj) = basis[leave];
            flow[(li, lj)] = 0.0;
            basic[li * n + lj] = false;
            basic[ei * n + ej] = true;
            basis[leave] = (ei, ej);
        }
        Err(Error::Consistency("transportation simplex did not terminate".into()))
    }
}

/// Dual potentials with `u[0] = 0` and `u_i + v_j = c_ij` on basic cells.
fn potentials(m: usize, n: usize, basis: &[(usize, usize)], c: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut row_cells = vec![Vec::new(); m];
    let mut col_cells = vec![Vec::new(); n];
    for &(i, j) in basis {
        row_cells[i].push(j);
        col_cells[j].push(i);
    }
    // Nodes 0..m are rows, m..m+n columns.
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        if node < m {
            for &j in &row_cells[node] {
                if v[j].is_nan() {
                    v[j] = c[(node, j)] - u[node];
                    stack.push(m + j);
                }
            }
        } else {
            let j = node - m;
            for &i in &col_cells[j] {
                if u[i].is_nan() {
                    u[i] = c[(i, j)] - v[j];
                    stack.push(i);
                }
            }
        }
    }
    (u, v)
}

/// Basis indices on the tree path from row `from_row` to column `to_col`,
/// ordered starting at the row end.
fn tree_path(m: usize, n: usize, basis: &[(usize, usize)], from_row: usize, to_col: usize) -> Vec<usize> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m + n];
    for (b, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((m + j, b));
        adj[m + j].push((i, b));
    }
    let target = m + to_col;
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    seen[from_row] = true;
    let mut queue = std::collections::VecDeque::from([from_row]);
    while let Some(x) = queue.pop_front() {
        if x == target {
            break;
        }
        for &(y, b) in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                prev[y] = Some((x, b));
                queue.push_back(y);
            }
        }
    }
    let mut path = Vec::new();
    let mut x = target;
    while let Some((p, b)) = prev[x] {
        path.push(b);
        x = p;
    }
    path.reverse();
    path
}

/// Outcome of a Sinkhorn solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// `<P, C>` for the entropic plan `P`.
    pub cost: f64,
    /// L1 violation of the row marginal after the last column update.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const SINKHORN_TOL: f64 = 1e-9;

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with regularization `eps`.
pub fn w1_sinkhorn(
    mu: &[f64],
    nu: &[f64],
    cost: &DMatrix<f64>,
    eps: f64,
    iters: usize,
) -> Result<SinkhornResult> {
    if !(eps > 0.0) || iters == 0 {
        return Err(Error::InvalidInput(format!("need eps > 0 and iters >= 1 (eps={eps}, iters={iters})")));
    }
    check_inputs(mu, nu, cost)?;
    let rows = support(mu);
    let cols = support(nu);
    if rows.is_empty() || cols.is_empty() {
        return Ok(SinkhornResult { cost: 0.0, residual: 0.0, iterations: 0, converged: true });
    }
    let (m, n) = (rows.len(), cols.len());
    let log_a: Vec<f64> = rows.iter().map(|&i| mu[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| nu[j].ln()).collect();
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let c: Vec<f64> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cost[(rows[i], cols[j])])
        .collect();
    let cmax = c.iter().copied().fold(0.0, f64::max);

    // Epsilon scaling: anneal from a coarse regularization down to `eps`,
    // warm-starting the dual potentials (kept in cost units).
    let mut schedule = Vec::new();
    let mut e = cmax;
    while e > eps {
        schedule.push(e);
        e *= 0.5;
    }
    schedule.push(eps);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut it = 0;
    let last = schedule.len() - 1;
    for (stage, &e) in schedule.iter().enumerate() {
        let stage_tol = if stage == last { SINKHORN_TOL } else { 1e-3 };
        let stage_cap = if stage == last { iters } else { (iters / 20).max(1) };
        let mut inner = 0;
        while it < iters && inner < stage_cap {
            it += 1;
            inner += 1;
            for i in 0..m {
                let row = &c[i * n..(i + 1) * n];
                f[i] = e * (log_a[i] - logsumexp(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) / e)));
            }
            for j in 0..n {
                g[j] = e * (log_b[j] - logsumexp((0..m).map(|i| (f[i] - c[i * n + j]) / e)));
            }
            let residual: f64 = (0..m)
                .map(|i| {
                    let row = &c[i * n..(i + 1) * n];
                    let s: f64 = row.iter().zip(&g).map(|(cij, gj)| ((f[i] + gj - cij) / e).exp()).sum();
                    (s - a[i]).abs()
                })
                .sum();
            if residual < stage_tol {
                break;
            }
        }
        if it >= iters {
            break;
        }
    }
    // Report the residual of the plan actually used, at the target `eps`.
    let residual: f64 = (0..m)
        .map(|i| {
            let row = &c[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(&g).map(|(cij, gj)| ((f[i] + gj - cij) / eps).exp()).sum();
            (s - a[i]).abs()
        })
        .sum();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let cij = c[i * n + j];
            total += ((f[i] + g[j] - cij) / eps).exp() * cij;
        }
    }
    Ok(SinkhornResult {
        cost: total,
        residual,
        iterations: it,
        converged: residual < SINKHORN_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use rand::Rng;

    fn line_cost(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), xs.len(), |i, j| (xs[i] - xs[j]).abs())
    }

    /// W1 on the real line: integral of |F_mu - F_nu|.
    fn w1_line_oracle(xs: &[f64], mu: &[f64], nu: &[f64]) -> f64 {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let (mut fa, mut fb, mut total) = (0.0, 0.0, 0.0);
        for w in idx.windows(2) {
            fa += mu[w[0]];
            fb += nu[w[0]];
            total += (fa - fb).abs() * (xs[w[1]] - xs[w[0]]);
        }
        total
    }

    fn random_simplex(rng: &mut impl Rng, n: usize, sparsity: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(sparsity) { 0.0 } else { rng.random_range(0.01..1.0) })
            .collect();
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn exact_identity_and_point_masses() {
        let c = line_cost(&[0.0, 1.0, 3.0]);
        let mu = [0.2, 0.5, 0.3];
        assert!(w1_exact(&mu, &mu, &c).unwrap().abs() < 1e-15);
        assert!((w1_exact(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &c).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_path_example() {
        // P3 a-b-c, lazy walks at a and b with alpha = 0.5.
        let c = line_cost(&[0.0, 1.0, 2.0]);
        let mu_a = [0.5, 0.5, 0.0];
        let mu_b = [0.25, 0.5, 0.25];
        assert!((w1_exact(&mu_a, &mu_b, &c).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_line_oracle() {
        let mut rng = Seed::new(3).rng();
        for _ in 0..300 {
            let n = rng.random_range(2..=12);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu = random_simplex(&mut rng, n, 0.3);
            let nu = random_simplex(&mut rng, n, 0.3);
            let exact = w1_exact(&mu, &nu, &line_cost(&xs)).unwrap();
            let oracle = w1_line_oracle(&xs, &mu, &nu);
            assert!((exact - oracle).abs() < 1e-10, "{exact} vs {oracle}");
        }
    }

    #[test]
    fn exact_rejects_mass_mismatch() {
        let c = line_cost(&[0.0, 1.0]);
        assert!(matches!(w1_exact(&[1.0, 0.0], &[0.5, 0.0], &c), Err(Error::MassMismatch(_))));
    }

    #[test]
    fn sinkhorn_identity_and_path() {
        let c = line_cost(&[0.0, 1.0, 2.0]);
        let mu = [0.25, 0.5, 0.25];
        let r = w1_sinkhorn(&mu, &mu, &c, 0.01, 2000).unwrap();
        assert!(r.cost <= 1e-6, "{r:?}");
        let r = w1_sinkhorn(&[0.5, 0.5, 0.0], &mu, &c, 0.005, 2000).unwrap();
        assert!((r.cost - 0.5).abs() <= 0.02, "{r:?}");
    }

    #[test]
    fn sinkhorn_close_to_exact_on_random_instances() {
        let mut rng = Seed::new(4).rng();
        for _ in 0..50 {
            let n = 10;
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
                .collect();
            let c = DMatrix::from_fn(n, n, |i, j| {
                ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
            });
            let mu = random_simplex(&mut rng, n, 0.0);
            let nu = random_simplex(&mut rng, n, 0.0);
            let exact = w1_exact(&mu, &nu, &c).unwrap();
            let s = w1_sinkhorn(&mu, &nu, &c, 0.005, 2000).unwrap();
            assert!((s.cost - exact).abs() <= 0.05 * exact, "{} vs {exact} {s:?}", s.cost);
        }
    }

    #[test]
    fn sinkhorn_reports_nonconvergence() {
        let c = line_cost(&[0.0, 1.0, 2.0]);
        let r = w1_sinkhorn(&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], &c, 0.001, 1).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(!r.converged && r.residual > 0.0);
        assert!(w1_sinkhorn(&[1.0], &[1.0], &DMatrix::zeros(1, 1), 0.0, 10).is_err());
    }
}
