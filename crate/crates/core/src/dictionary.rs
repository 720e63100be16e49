//! Per-client dictionaries, the reconstruction loss and its gradients.
//!
//! The loss of a client is the (supervised, for labeled clients) squared
//! Mixture-Wasserstein distance between the client's fitted mixture and the
//! barycenter of its atoms at its coordinates. Gradients freeze every optimal
//! plan at the current point: the outer domain-to-barycenter plan and the
//! inner barycenter-to-atom plans. With the inner plans frozen, each
//! barycenter component is a fixed linear combination of atom parameters, so
//! the chain rule is exact wherever the plans are locally unique.

use serde::{Deserialize, Serialize};

use crate::barycenter::{check_atoms, gmm_barycenter, project_positive, project_simplex, BarycenterConfig, BarycentricCoords};
use crate::error::{Error, Result};
use crate::gmm::{DiagGaussian, LabeledGmm};
use crate::seed;
use crate::transport::{add_label_cost, geometric_cost, solve_exact_ot, LabelPenalty};
use rand::Rng;
use rand_distr::StandardNormal;

/// Atoms plus the private barycentric coordinates of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub atoms: Vec<LabeledGmm>,
    pub alpha: BarycentricCoords,
}

impl Dictionary {
    pub fn new(atoms: Vec<LabeledGmm>, alpha: BarycentricCoords) -> Result<Self> {
        let d = Dictionary { atoms, alpha };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        check_atoms(&self.atoms)?;
        for a in &self.atoms {
            a.validate()?;
        }
        if self.alpha.len() != self.atoms.len() {
            return Err(Error::Congruence(format!("{} atoms but {} coordinates", self.atoms.len(), self.alpha.len())));
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Same atom count and per-atom shape.
    pub fn congruent(&self, other: &[LabeledGmm]) -> bool {
        other.len() == self.atoms.len() && self.atoms.iter().zip(other).all(|(a, b)| a.congruent(b))
    }

    pub fn barycenter(&self, config: &BarycenterConfig) -> Result<LabeledGmm> {
        Ok(gmm_barycenter(&self.atoms, &self.alpha, config)?.gmm)
    }
}

/// Initial dictionary: standard-normal means, unit variances, uniform label
/// rows, uniform mixture weights and uniform coordinates.
pub fn init_dictionary(k: usize, c: usize, d: usize, n_class: usize, rng_seed: u64) -> Result<Dictionary> {
    if k == 0 || c == 0 || d == 0 || n_class == 0 {
        return Err(Error::invalid("dictionary sizes must all be positive"));
    }
    let mut rng = seed::rng(rng_seed);
    let atoms = (0..k)
        .map(|_| {
            let components = (0..c)
                .map(|_| DiagGaussian {
                    mean: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
                    var: vec![1.0; d],
                })
                .collect();
            LabeledGmm {
                weights: vec![1.0 / c as f64; c],
                components,
                labels: vec![vec![1.0 / n_class as f64; n_class]; c],
            }
        })
        .collect();
    Dictionary::new(atoms, BarycentricCoords::uniform(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Supervised MW2 (labeled source clients).
    Supervised,
    /// Plain MW2 (the unlabeled target client).
    Unsupervised,
}

/// Gradient of the loss with respect to one atom's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomGrad {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub grads: Vec<AtomGrad>,
    /// Gradient along the simplex: the Euclidean gradient with its mean
    /// removed, so it sums to zero.
    pub grad_alpha: Vec<f64>,
    pub kind: LossKind,
    /// Label penalty actually applied (0 for the unsupervised loss).
    pub label_penalty: f64,
    pub barycenter_converged: bool,
}

fn zeros(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

/// Reconstruction loss of `domain` by the dictionary's barycenter, with
/// frozen-plan gradients for every atom parameter and the coordinates.
pub fn client_loss(
    dict: &Dictionary,
    domain: &LabeledGmm,
    is_labeled: bool,
    label_penalty: LabelPenalty,
    config: &BarycenterConfig,
) -> Result<LossReport> {
    let first = &dict.atoms[0];
    if domain.dim() != first.dim() || domain.n_class() != first.n_class() {
        return Err(Error::Congruence("domain mixture does not match the dictionary".into()));
    }
    let bary = gmm_barycenter(&dict.atoms, &dict.alpha, config)?;
    let b = &bary.gmm;

    // outer plan: domain components (rows) to barycenter components (cols)
    let geometric = geometric_cost(domain, b)?;
    let (kind, lambda) = if is_labeled {
        (LossKind::Supervised, label_penalty.resolve(&geometric))
    } else {
        (LossKind::Unsupervised, 0.0)
    };
    let cost = if lambda > 0.0 { add_label_cost(&geometric, domain, b, lambda)? } else { geometric };
    let (plan, value) = solve_exact_ot(&cost, &domain.weights, &b.weights)?;

    let c_bar = b.n_components();
    let d = b.dim();
    let n_class = b.n_class();
    let b_std: Vec<Vec<f64>> = b.components.iter().map(DiagGaussian::std).collect();
    let q_std: Vec<Vec<f64>> = domain.components.iter().map(DiagGaussian::std).collect();

    // dL/d(barycenter parameters)
    let mut g_mean = zeros(c_bar, d);
    let mut g_std = zeros(c_bar, d);
    let mut g_lab = zeros(c_bar, n_class);
    for (i, row) in plan.matrix.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for t in 0..d {
                g_mean[c][t] += 2.0 * p * (b.components[c].mean[t] - domain.components[i].mean[t]);
                g_std[c][t] += 2.0 * p * (b_std[c][t] - q_std[i][t]);
            }
            if lambda > 0.0 {
                for t in 0..n_class {
                    g_lab[c][t] += 2.0 * p * lambda * (b.labels[c][t] - domain.labels[i][t]);
                }
            }
        }
    }

    // chain through B_c = sum_k alpha_k sum_j T_k[c][j] X_kj, T_k = plan_k / w_B
    let mut grads = Vec::with_capacity(dict.n_atoms());
    let mut grad_alpha = Vec::with_capacity(dict.n_atoms());
    for ((atom, &a), inner) in dict.atoms.iter().zip(dict.alpha.iter()).zip(&bary.plans) {
        let c_atom = atom.n_components();
        let mut gm = zeros(c_atom, d);
        let mut gs = zeros(c_atom, d);
        let mut gl = zeros(c_atom, n_class);
        let mut ga = 0.0;
        let a_std: Vec<Vec<f64>> = atom.components.iter().map(DiagGaussian::std).collect();
        for c in 0..c_bar {
            let wc = b.weights[c];
            if wc == 0.0 {
                continue;
            }
            for (j, &p) in inner.matrix[c].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let t_cj = p / wc;
                for t in 0..d {
                    gm[j][t] += a * t_cj * g_mean[c][t];
                    gs[j][t] += a * t_cj * g_std[c][t];
                    ga += t_cj * (g_mean[c][t] * atom.components[j].mean[t] + g_std[c][t] * a_std[j][t]);
                }
                for t in 0..n_class {
                    gl[j][t] += a * t_cj * g_lab[c][t];
                    ga += t_cj * g_lab[c][t] * atom.labels[j][t];
                }
            }
        }
        // d sigma / d var = 1 / (2 sigma)
        let gv = gs
            .iter()
            .zip(&a_std)
            .map(|(row, s)| row.iter().zip(s).map(|(g, s)| g / (2.0 * s)).collect())
            .collect();
        grads.push(AtomGrad { means: gm, vars: gv, labels: gl });
        grad_alpha.push(ga);
    }
    let mean_ga = grad_alpha.iter().sum::<f64>() / grad_alpha.len() as f64;
    grad_alpha.iter_mut().for_each(|g| *g -= mean_ga);

    Ok(LossReport {
        value: value.max(0.0),
        grads,
        grad_alpha,
        kind,
        label_penalty: lambda,
        barycenter_converged: bary.converged,
    })
}

/// One projected-gradient update of a dictionary from a computed report.
pub fn apply_gradients(dict: &Dictionary, report: &LossReport, eta: f64, var_floor: f64) -> Result<Dictionary> {
    let atoms = dict
        .atoms
        .iter()
        .zip(&report.grads)
        .map(|(atom, g)| {
            let components = atom
                .components
                .iter()
                .enumerate()
                .map(|(j, comp)| {
                    let mean = comp.mean.iter().zip(&g.means[j]).map(|(m, gm)| m - eta * gm).collect();
                    let stepped: Vec<f64> = comp.var.iter().zip(&g.vars[j]).map(|(v, gv)| v - eta * gv).collect();
                    DiagGaussian { mean, var: project_positive(&stepped, var_floor) }
                })
                .collect();
            let labels = atom
                .labels
                .iter()
                .zip(&g.labels)
                .map(|(row, gl)| {
                    let stepped: Vec<f64> = row.iter().zip(gl).map(|(v, g)| v - eta * g).collect();
                    project_simplex(&stepped)
                })
                .collect();
            LabeledGmm { weights: atom.weights.clone(), components, labels }
        })
        .collect();
    let stepped: Vec<f64> = dict.alpha.iter().zip(&report.grad_alpha).map(|(a, g)| a - eta * g).collect();
    let next = Dictionary { atoms, alpha: BarycentricCoords::projected(&stepped) };
    if next.atoms.iter().any(|a| a.components.iter().any(|c| c.mean.iter().any(|m| !m.is_finite()))) {
        return Err(Error::Numerical("non-finite atom mean after gradient step".into()));
    }
    Ok(next)
}

/// Settings shared by every local update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub eta: f64,
    pub label_penalty: LabelPenalty,
    pub var_floor: f64,
    pub barycenter: BarycenterConfig,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            eta: 0.05,
            label_penalty: LabelPenalty::default(),
            var_floor: 1e-6,
            barycenter: BarycenterConfig::default(),
        }
    }
}

/// One projected-gradient step on means, variances, label rows and
/// coordinates. The input dictionary is left untouched.
pub fn local_step(dict: &Dictionary, domain: &LabeledGmm, is_labeled: bool, step: &StepConfig) -> Result<Dictionary> {
    let report = client_loss(dict, domain, is_labeled, step.label_penalty, &step.barycenter)?;
    apply_gradients(dict, &report, step.eta, step.var_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(m: f64, v: f64) -> LabeledGmm {
        LabeledGmm::new(vec![1.0], vec![DiagGaussian::new(vec![m], vec![v]).unwrap()], vec![vec![1.0]]).unwrap()
    }

    #[test]
    fn init_follows_recipe() {
        let d = init_dictionary(2, 3, 2, 4, 5).unwrap();
        assert_eq!(&*d.alpha, &[0.5, 0.5]);
        for a in &d.atoms {
            assert!(a.components.iter().all(|c| c.var == vec![1.0, 1.0]));
            assert!(a.labels.iter().all(|r| r == &vec![0.25; 4]));
            assert_eq!(a.weights, vec![1.0 / 3.0; 3]);
        }
        assert_eq!(d, init_dictionary(2, 3, 2, 4, 5).unwrap());
        assert_ne!(d.atoms[0].components[0].mean, init_dictionary(2, 3, 2, 4, 6).unwrap().atoms[0].components[0].mean);
        assert!(init_dictionary(0, 3, 2, 4, 5).is_err());
    }

    #[test]
    fn exact_reconstruction_has_zero_loss_and_gradient() {
        let dict = init_dictionary(3, 4, 2, 3, 1).unwrap();
        let mut dict = dict;
        dict.alpha = BarycentricCoords::new(vec![0.2, 0.5, 0.3]).unwrap();
        let cfg = BarycenterConfig::default();
        let domain = dict.barycenter(&cfg).unwrap();
        for labeled in [true, false] {
            let r = client_loss(&dict, &domain, labeled, LabelPenalty::Fixed(10.0), &cfg).unwrap();
            assert!(r.value.abs() < 1e-12, "{}", r.value);
            for g in &r.grads {
                for x in g.means.iter().chain(&g.vars).chain(&g.labels).flatten() {
                    assert!(x.abs() < 1e-7);
                }
            }
            assert!(r.grad_alpha.iter().all(|x| x.abs() < 1e-7));
        }
    }

    #[test]
    fn single_atom_has_no_alpha_gradient() {
        let dict = init_dictionary(1, 2, 2, 2, 3).unwrap();
        let domain = init_dictionary(1, 2, 2, 2, 4).unwrap().atoms.remove(0);
        let r = client_loss(&dict, &domain, false, LabelPenalty::Fixed(1.0), &BarycenterConfig::default()).unwrap();
        assert_eq!(r.grad_alpha, vec![0.0]);
        assert!(r.value > 0.0);
    }

    #[test]
    fn loss_kind_follows_label_flag() {
        let dict = init_dictionary(2, 2, 1, 2, 3).unwrap();
        let domain = init_dictionary(1, 2, 1, 2, 4).unwrap().atoms.remove(0);
        let cfg = BarycenterConfig::default();
        let s = client_loss(&dict, &domain, true, LabelPenalty::Fixed(1.0), &cfg).unwrap();
        let u = client_loss(&dict, &domain, false, LabelPenalty::Fixed(1.0), &cfg).unwrap();
        assert_eq!(s.kind, LossKind::Supervised);
        assert_eq!(u.kind, LossKind::Unsupervised);
        assert_eq!(u.label_penalty, 0.0);
    }

    #[test]
    fn zero_step_keeps_dictionary() {
        let dict = init_dictionary(2, 3, 2, 3, 9).unwrap();
        let domain = init_dictionary(1, 3, 2, 3, 10).unwrap().atoms.remove(0);
        let step = StepConfig { eta: 0.0, ..StepConfig::default() };
        let next = local_step(&dict, &domain, false, &step).unwrap();
        assert_eq!(next, dict);
    }

    #[test]
    fn scalar_problem_converges() {
        let dict = Dictionary::new(vec![single(0.0, 1.0)], BarycentricCoords::uniform(1)).unwrap();
        let domain = single(3.0, 1.5);
        let step = StepConfig { eta: 0.05, ..StepConfig::default() };
        let cfg = step.barycenter;
        let initial = client_loss(&dict, &domain, false, step.label_penalty, &cfg).unwrap().value;
        let mut cur = dict;
        let mut prev = initial;
        for _ in 0..50 {
            cur = local_step(&cur, &domain, false, &step).unwrap();
            let v = client_loss(&cur, &domain, false, step.label_penalty, &cfg).unwrap().value;
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        assert!(prev < 0.01 * initial, "{prev} vs {initial}");
    }

    #[test]
    fn step_preserves_invariants() {
        let dict = init_dictionary(3, 3, 2, 3, 21).unwrap();
        let domain = init_dictionary(1, 3, 2, 3, 22).unwrap().atoms.remove(0);
        let step = StepConfig { eta: 5.0, label_penalty: LabelPenalty::Fixed(50.0), ..StepConfig::default() };
        let next = local_step(&dict, &domain, true, &step).unwrap();
        next.validate().unwrap();
        assert!(next.atoms.iter().all(|a| a.components.iter().all(|c| c.var.iter().all(|v| *v >= 1e-6))));
    }
}
