//! Wasserstein barycenters of diagonal Gaussians and of labeled GMM atoms.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{DiagGaussian, LabeledGmm};
use crate::transport::{mw2_sq, TransportPlan};

const SIMPLEX_TOL: f64 = 1e-9;

/// A point of the probability simplex: a domain's coordinates over the atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BarycentricCoords(Vec<f64>);

impl BarycentricCoords {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("empty barycentric coordinates"));
        }
        if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("barycentric coordinates must be nonnegative"));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("barycentric coordinates sum to {s}")));
        }
        Ok(BarycentricCoords(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        BarycentricCoords(vec![1.0 / k as f64; k])
    }

    pub fn vertex(k: usize, i: usize) -> Self {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        BarycentricCoords(v)
    }

    /// Project an arbitrary vector and wrap the result.
    pub fn projected(v: &[f64]) -> Self {
        BarycentricCoords(project_simplex(v))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for BarycentricCoords {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for BarycentricCoords {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BarycentricCoords::new(v)
    }
}

impl From<BarycentricCoords> for Vec<f64> {
    fn from(c: BarycentricCoords) -> Self {
        c.0
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "projection of an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Elementwise `max(v, floor)`.
pub fn project_positive(v: &[f64], floor: f64) -> Vec<f64> {
    v.iter().map(|x| x.max(floor)).collect()
}

/// Closed-form W2 barycenter of diagonal Gaussians: means and standard
/// deviations are averaged with the given weights.
pub fn gaussian_barycenter(components: &[DiagGaussian], weights: &[f64]) -> Result<DiagGaussian> {
    if components.is_empty() {
        return Err(Error::invalid("barycenter of no components"));
    }
    check_dim(components.len(), weights.len())?;
    BarycentricCoords::new(weights.to_vec())?;
    let d = components[0].dim();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for (c, w) in components.iter().zip(weights) {
        check_dim(d, c.dim())?;
        for i in 0..d {
            mean[i] += w * c.mean[i];
            std[i] += w * c.var[i].sqrt();
        }
    }
    DiagGaussian::new(mean, std.into_iter().map(|s| s * s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarycenterConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        BarycenterConfig { tol: 1e-7, max_iters: 50 }
    }
}

/// Output of the fixed-point barycenter solver.
#[derive(Debug, Clone)]
pub struct Barycenter {
    pub gmm: LabeledGmm,
    /// Optimal plans between the barycenter (rows) and each atom (columns).
    pub plans: Vec<TransportPlan>,
    /// `sum_k alpha_k MW2^2(B, P_k)` at every iterate, starting with the
    /// initialization.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl Barycenter {
    pub fn value(&self) -> f64 {
        *self.objective.last().unwrap()
    }
}

pub(crate) fn check_atoms(atoms: &[LabeledGmm]) -> Result<()> {
    let first = atoms.first().ok_or_else(|| Error::invalid("no atoms"))?;
    for a in atoms {
        if !a.congruent(first) {
            return Err(Error::Congruence(format!(
                "atom with {} components, dim {}, {} classes vs {} / {} / {}",
                a.n_components(),
                a.dim(),
                a.n_class(),
                first.n_components(),
                first.dim(),
                first.n_class()
            )));
        }
    }
    Ok(())
}

fn evaluate(b: &LabeledGmm, atoms: &[LabeledGmm], alpha: &[f64]) -> Result<(f64, Vec<TransportPlan>)> {
    let mut total = 0.0;
    let mut plans = Vec::with_capacity(atoms.len());
    for (atom, a) in atoms.iter().zip(alpha) {
        let (v, plan) = mw2_sq(b, atom)?;
        total += a * v;
        plans.push(plan);
    }
    Ok((total, plans))
}

/// Recompute every barycenter component as the transport-weighted average of
/// the atom components it receives mass from.
pub(crate) fn average_under_plans(
    weights: &[f64],
    atoms: &[LabeledGmm],
    alpha: &[f64],
    plans: &[TransportPlan],
) -> Result<LabeledGmm> {
    let c_count = weights.len();
    let d = atoms[0].dim();
    let n_class = atoms[0].n_class();
    let mut components = Vec::with_capacity(c_count);
    let mut labels = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let wc = weights[c];
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut row = vec![0.0; n_class];
        for ((atom, a), plan) in atoms.iter().zip(alpha).zip(plans) {
            for (j, p) in plan.matrix[c].iter().enumerate() {
                let lambda = if wc > 0.0 { a * p / wc } else { 0.0 };
                if lambda == 0.0 {
                    continue;
                }
                let comp = &atom.components[j];
                for i in 0..d {
                    mean[i] += lambda * comp.mean[i];
                    std[i] += lambda * comp.var[i].sqrt();
                }
                for (r, l) in row.iter_mut().zip(&atom.labels[j]) {
                    *r += lambda * l;
                }
            }
        }
        if wc == 0.0 {
            // massless component: keep it where the first atom's would be
            mean.clone_from(&atoms[0].components[c].mean);
            std = atoms[0].components[c].std();
            row.clone_from(&atoms[0].labels[c]);
        }
        let var = std.iter().map(|s| (s * s).max(f64::MIN_POSITIVE)).collect();
        components.push(DiagGaussian { mean, var });
        labels.push(row);
    }
    Ok(LabeledGmm { weights: weights.to_vec(), components, labels })
}

/// Labeled Mixture-Wasserstein barycenter of `atoms` with coordinates `alpha`.
///
/// Fixed-point iteration: start from the atom with the largest coordinate,
/// then alternate between solving the barycenter-to-atom plans and moving
/// each barycenter component to the plan-weighted Gaussian barycenter of the
/// atom components. Mixture weights stay those of the starting atom. Label
/// rows are averaged with the same weights as the Gaussian parameters.
pub fn gmm_barycenter(atoms: &[LabeledGmm], alpha: &BarycentricCoords, config: &BarycenterConfig) -> Result<Barycenter> {
    check_atoms(atoms)?;
    check_dim(atoms.len(), alpha.len())?;
    let start = alpha
        .iter()
        .enumerate()
        .fold(0, |best, (k, a)| if *a > alpha[best] { k } else { best });
    let mut current = atoms[start].clone();
    let (mut value, mut plans) = evaluate(&current, atoms, alpha)?;
    let mut objective = vec![value];
    let mut converged = false;
    for _ in 0..config.max_iters {
        let next = average_under_plans(&current.weights, atoms, alpha, &plans)?;
        let (next_value, next_plans) = evaluate(&next, atoms, alpha)?;
        let improvement = value - next_value;
        current = next;
        value = next_value;
        plans = next_plans;
        objective.push(value);
        if improvement < config.tol {
            converged = true;
            break;
        }
    }
    Ok(Barycenter { gmm: current, plans, objective, converged })
}
