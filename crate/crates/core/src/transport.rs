//! Exact discrete optimal transport between mixture weight vectors.
//!
//! Mixtures are compared component-by-component: the ground cost between two
//! components is the squared 2-Wasserstein distance between the Gaussians
//! (plus a label-mismatch penalty in the supervised variant) and the plan is
//! the exact solution of the resulting transportation problem.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{DiagGaussian, LabeledGmm};

const MARGINAL_TOL: f64 = 1e-9;

/// Pairwise ground costs, rows indexed by the first mixture's components.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub Vec<Vec<f64>>);

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.0.len()
    }

    pub fn cols(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    pub fn median(&self) -> f64 {
        let mut all: Vec<f64> = self.0.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let n = all.len();
        if n == 0 {
            0.0
        } else if n % 2 == 1 {
            all[n / 2]
        } else {
            0.5 * (all[n / 2 - 1] + all[n / 2])
        }
    }
}

/// A coupling between two weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Vec<Vec<f64>>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.matrix.len()
    }

    pub fn cols(&self) -> usize {
        self.col_marginal.len()
    }

    /// Largest deviation of the plan's row/column sums from its marginals.
    pub fn marginal_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for (row, r) in self.matrix.iter().zip(&self.row_marginal) {
            err = err.max((row.iter().sum::<f64>() - r).abs());
        }
        for (j, c) in self.col_marginal.iter().enumerate() {
            let s: f64 = self.matrix.iter().map(|row| row[j]).sum();
            err = err.max((s - c).abs());
        }
        err
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.matrix
            .iter()
            .zip(&cost.0)
            .map(|(p, c)| p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// squared mean distance plus squared distance between standard deviations.
pub fn gaussian_w2_sq(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(gaussian_w2_sq_unchecked(a, b))
}

pub(crate) fn gaussian_w2_sq_unchecked(a: &DiagGaussian, b: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.mean.len() {
        let dm = a.mean[i] - b.mean[i];
        let ds = a.var[i].sqrt() - b.var[i].sqrt();
        acc += dm * dm + ds * ds;
    }
    acc
}

fn check_marginal(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::invalid(format!("{what} has negative entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > MARGINAL_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Solve `min <plan, cost>` over couplings of `mu` and `nu` exactly.
pub fn solve_exact_ot(cost: &CostMatrix, mu: &[f64], nu: &[f64]) -> Result<(TransportPlan, f64)> {
    check_marginal(mu, "row marginal")?;
    check_marginal(nu, "column marginal")?;
    check_dim(mu.len(), cost.rows())?;
    for row in &cost.0 {
        check_dim(nu.len(), row.len())?;
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite transport cost"));
        }
    }
    let matrix = transportation_simplex(&cost.0, mu, nu)?;
    let plan = TransportPlan { matrix, row_marginal: mu.to_vec(), col_marginal: nu.to_vec() };
    let value = plan.cost(cost);
    Ok((plan, value))
}

/// Primal transportation simplex (MODI) started from the north-west corner.
///
/// The basis is kept as a spanning tree of the bipartite row/column graph
/// with exactly `m + n - 1` cells, degenerate zero-flow cells included.
/// Dantzig pricing is used until a run of degenerate pivots appears, after
/// which Bland's rule takes over to rule out cycling.
fn transportation_simplex(cost: &[Vec<f64>], supply: &[f64], demand: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = supply.len();
    let n = demand.len();
    let mut flow = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];

    let mut rem_r = supply.to_vec();
    let mut rem_c = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let x = rem_r[i].min(rem_c[j]).max(0.0);
        flow[i][j] = x;
        basic[i][j] = true;
        let row_done = rem_r[i] <= rem_c[j];
        rem_r[i] -= x;
        rem_c[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || row_done {
            i += 1;
        } else {
            j += 1;
        }
    }
    if m * n == 1 {
        return Ok(flow);
    }

    let scale = cost.iter().flatten().fold(1.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let max_iter = 1000 + 50 * m * n;
    let mut degenerate_run = 0usize;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];

    for _ in 0..max_iter {
        potentials(cost, &basic, &mut u, &mut v);
        let bland = degenerate_run > m + n;
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for (i, row) in cost.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if basic[i][j] {
                    continue;
                }
                let reduced = c - u[i] - v[j];
                if reduced < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = reduced;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            for row in flow.iter_mut() {
                for x in row.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            return Ok(flow);
        };

        let cycle = tree_path(&basic, m, n, ei, ej);
        // cycle[k] for odd k loses flow, even k gains; cycle[0] is the entering cell.
        let mut theta = f64::INFINITY;
        let mut leaving = (0, 0);
        for (k, &(ci, cj)) in cycle.iter().enumerate().skip(1).step_by(2) {
            let f = flow[ci][cj];
            let better = f < theta || (bland && f == theta && (ci, cj) < leaving);
            if better || k == 1 && theta == f64::INFINITY {
                theta = f;
                leaving = (ci, cj);
            }
        }
        let theta = theta.max(0.0);
        for (k, &(ci, cj)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flow[ci][cj] += theta;
            } else {
                flow[ci][cj] -= theta;
            }
        }
        flow[leaving.0][leaving.1] = 0.0;
        basic[leaving.0][leaving.1] = false;
        basic[ei][ej] = true;
        if theta == 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
    }
    Err(Error::Numerical(format!("transport simplex did not terminate on a {m}x{n} problem")))
}

/// Dual potentials with `u[0] = 0` and `u[i] + v[j] = cost[i][j]` on basic cells.
fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>], u: &mut [f64], v: &mut [f64]) {
    let m = u.len();
    let n = v.len();
    let mut seen_r = vec![false; m];
    let mut seen_c = vec![false; n];
    u[0] = 0.0;
    seen_r[0] = true;
    // stack of (is_row, index)
    let mut stack = vec![(true, 0usize)];
    while let Some((is_row, idx)) = stack.pop() {
        if is_row {
            for j in 0..n {
                if basic[idx][j] && !seen_c[j] {
                    v[j] = cost[idx][j] - u[idx];
                    seen_c[j] = true;
                    stack.push((false, j));
                }
            }
        } else {
            for i in 0..m {
                if basic[i][idx] && !seen_r[i] {
                    u[i] = cost[i][idx] - v[idx];
                    seen_r[i] = true;
                    stack.push((true, i));
                }
            }
        }
    }
}

/// Cells of the pivot cycle closed by the non-basic cell `(ei, ej)`, starting
/// with that cell and alternating gain/loss along the tree path.
fn tree_path(basic: &[Vec<bool>], m: usize, n: usize, ei: usize, ej: usize) -> Vec<(usize, usize)> {
    // nodes: rows 0..m, columns m..m+n. BFS from row ei to column ej.
    let total = m + n;
    let mut parent = vec![usize::MAX; total];
    let mut visited = vec![false; total];
    let mut queue = std::collections::VecDeque::new();
    visited[ei] = true;
    queue.push_back(ei);
    let target = m + ej;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        if node < m {
            for j in 0..n {
                let nb = m + j;
                if basic[node][j] && !visited[nb] {
                    visited[nb] = true;
                    parent[nb] = node;
                    queue.push_back(nb);
                }
            }
        } else {
            let col = node - m;
            for i in 0..m {
                if basic[i][col] && !visited[i] {
                    visited[i] = true;
                    parent[i] = node;
                    queue.push_back(i);
                }
            }
        }
    }
    // walk back from the column node to the row node
    let mut cells = vec![(ei, ej)];
    let mut node = target;
    while node != ei {
        let p = parent[node];
        let cell = if node >= m { (p, node - m) } else { (node, p - m) };
        cells.push(cell);
        node = p;
    }
    // The walk above starts at column ej, so the first tree cell shares the
    // entering cell's column. Reverse it so the loss cell shares row ei.
    let mut ordered = vec![(ei, ej)];
    ordered.extend(cells[1..].iter().rev());
    ordered
}

/// How heavily SMW2 penalizes transporting mass between components with
/// different class-assignment vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum LabelPenalty {
    /// A fixed multiplier of the squared label distance.
    Fixed(f64),
    /// `factor` times the median entry of the geometric cost matrix,
    /// recomputed on every call.
    Adaptive(f64),
}

impl Default for LabelPenalty {
    fn default() -> Self {
        LabelPenalty::Adaptive(1e3)
    }
}

impl LabelPenalty {
    pub fn resolve(&self, geometric: &CostMatrix) -> f64 {
        match *self {
            LabelPenalty::Fixed(p) => p,
            LabelPenalty::Adaptive(factor) => factor * geometric.median(),
        }
    }
}

/// Gaussian W2 ground costs between the components of two mixtures.
pub fn geometric_cost(p: &LabeledGmm, q: &LabeledGmm) -> Result<CostMatrix> {
    check_dim(p.dim(), q.dim())?;
    Ok(CostMatrix(
        p.components
            .iter()
            .map(|a| q.components.iter().map(|b| gaussian_w2_sq_unchecked(a, b)).collect())
            .collect(),
    ))
}

/// Adds `penalty * ||V_p - V_q||^2` to every entry of a geometric cost matrix.
pub fn add_label_cost(geometric: &CostMatrix, p: &LabeledGmm, q: &LabeledGmm, penalty: f64) -> Result<CostMatrix> {
    check_dim(p.n_class(), q.n_class())?;
    let mut out = geometric.clone();
    for (row, lp) in out.0.iter_mut().zip(&p.labels) {
        for (c, lq) in row.iter_mut().zip(&q.labels) {
            let d: f64 = lp.iter().zip(lq).map(|(a, b)| (a - b) * (a - b)).sum();
            *c += penalty * d;
        }
    }
    Ok(out)
}

/// Mixture-Wasserstein distance, squared. Labels are ignored.
pub fn mw2_sq(p: &LabeledGmm, q: &LabeledGmm) -> Result<(f64, TransportPlan)> {
    let cost = geometric_cost(p, q)?;
    let (plan, value) = solve_exact_ot(&cost, &p.weights, &q.weights)?;
    Ok((value, plan))
}

/// Supervised Mixture-Wasserstein distance, squared.
pub fn smw2_sq(p: &LabeledGmm, q: &LabeledGmm, label_penalty: f64) -> Result<(f64, TransportPlan)> {
    if !(label_penalty >= 0.0) {
        return Err(Error::invalid("label penalty must be nonnegative"));
    }
    let geometric = geometric_cost(p, q)?;
    let cost = add_label_cost(&geometric, p, q, label_penalty)?;
    let (plan, value) = solve_exact_ot(&cost, &p.weights, &q.weights)?;
    Ok((value, plan))
}

/// [`smw2_sq`] with the penalty resolved from the geometric costs.
pub fn smw2_sq_with(p: &LabeledGmm, q: &LabeledGmm, penalty: LabelPenalty) -> Result<(f64, TransportPlan, f64)> {
    let geometric = geometric_cost(p, q)?;
    let lambda = penalty.resolve(&geometric);
    let cost = add_label_cost(&geometric, p, q, lambda)?;
    let (plan, value) = solve_exact_ot(&cost, &p.weights, &q.weights)?;
    Ok((value, plan, lambda))
}
