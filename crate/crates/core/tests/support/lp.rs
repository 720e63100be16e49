//! Dense two-phase tableau simplex with Bland's rule. Slow and simple, used
//! only as an independent reference for the transport solver.

const EPS: f64 = 1e-11;

/// Minimize `c.x` subject to `a x = b`, `x >= 0`. Returns the optimal value,
/// or `None` when infeasible.
pub fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; width];
        for j in 0..n {
            row[j] = sign * a[i][j];
        }
        row[n + i] = 1.0;
        row[width - 1] = sign * b[i];
        t.push(row);
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let phase1: Vec<f64> = (0..n + m).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
    run(&mut t, &mut basis, &phase1, n + m);
    let infeasibility: f64 = basis.iter().zip(&t).filter(|(&j, _)| j >= n).map(|(_, r)| r[width - 1]).sum();
    if infeasibility > 1e-9 {
        return None;
    }

    // drive zero-level artificials out of the basis, dropping redundant rows
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > EPS) {
                pivot(&mut t, i, j);
                basis[i] = j;
            } else {
                t.remove(i);
                basis.remove(i);
                continue;
            }
        }
        i += 1;
    }

    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat(0.0).take(m));
    run(&mut t, &mut basis, &phase2, n);
    let mut x = vec![0.0; n];
    for (r, &j) in basis.iter().enumerate() {
        if j < n {
            x[j] = t[r][width - 1];
        }
    }
    let value = c.iter().zip(&x).map(|(c, x)| c * x).sum();
    Some((value, x))
}

fn pivot(t: &mut [Vec<f64>], r: usize, j: usize) {
    let p = t[r][j];
    t[r].iter_mut().for_each(|v| *v /= p);
    let row = t[r].clone();
    for (i, other) in t.iter_mut().enumerate() {
        if i != r {
            let f = other[j];
            if f != 0.0 {
                other.iter_mut().zip(&row).for_each(|(v, w)| *v -= f * w);
            }
        }
    }
}

/// Bland's rule: lowest-index improving column, lowest-index leaving
/// variable among ratio ties. Only columns `< allowed` may enter.
fn run(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
    let width = t.first().map_or(0, Vec::len);
    loop {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let reduced = cost[j] - basis.iter().zip(t.iter()).map(|(&bj, row)| cost[bj] * row[j]).sum::<f64>();
            reduced < -1e-10
        });
        let Some(j) = entering else { return };
        let mut best: Option<(usize, f64)> = None;
        for (r, row) in t.iter().enumerate() {
            if row[j] > EPS {
                let ratio = row[width - 1] / row[j];
                best = match best {
                    None => Some((r, ratio)),
                    Some((br, bratio)) => {
                        if ratio < bratio - 1e-12 || (ratio <= bratio + 1e-12 && basis[r] < basis[br]) {
                            Some((r, ratio))
                        } else {
                            Some((br, bratio))
                        }
                    }
                };
            }
        }
        let (r, _) = best.expect("unbounded transport LP");
        pivot(t, r, j);
        basis[r] = j;
    }
}

/// Transport LP in standard form: row sums equal `mu`, column sums `nu`.
pub fn transport_value(cost: &[Vec<f64>], mu: &[f64], nu: &[f64]) -> f64 {
    let (m, n) = (mu.len(), nu.len());
    let c: Vec<f64> = cost.iter().flatten().copied().collect();
    let mut a = vec![vec![0.0; m * n]; m + n];
    for i in 0..m {
        for j in 0..n {
            a[i][i * n + j] = 1.0;
            a[m + j][i * n + j] = 1.0;
        }
    }
    let b: Vec<f64> = mu.iter().chain(nu).copied().collect();
    minimize(&c, &a, &b).expect("transport LP is always feasible").0
}
