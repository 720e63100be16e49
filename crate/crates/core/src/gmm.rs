//! Diagonal Gaussians, labeled Gaussian mixtures and EM fitting.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SUM_TOL: f64 = 1e-9;

/// One mixture component: a Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("Gaussian with zero dimensions"));
        }
        check_dim(mean.len(), var.len())?;
        if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("variance must be positive and finite, got {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite mean"));
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&self.mean).zip(&self.var) {
            let r = xi - mi;
            acc += r * r / vi + vi.ln() + LN_2PI;
        }
        -0.5 * acc
    }
}

/// A Gaussian mixture whose components carry class-assignment vectors.
///
/// Serves both as a client's fitted domain model and as a dictionary atom.
/// The JSON form is `{weights, means, vars, labels}` with one row per
/// component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmJson", into = "GmmJson")]
pub struct LabeledGmm {
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
    pub labels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GmmJson {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
}

impl TryFrom<GmmJson> for LabeledGmm {
    type Error = Error;

    fn try_from(j: GmmJson) -> Result<Self> {
        check_dim(j.means.len(), j.vars.len())?;
        let components = j
            .means
            .into_iter()
            .zip(j.vars)
            .map(|(m, v)| DiagGaussian::new(m, v))
            .collect::<Result<Vec<_>>>()?;
        LabeledGmm::new(j.weights, components, j.labels)
    }
}

impl From<LabeledGmm> for GmmJson {
    fn from(g: LabeledGmm) -> Self {
        let (means, vars) = g.components.into_iter().map(|c| (c.mean, c.var)).unzip();
        GmmJson { weights: g.weights, means, vars, labels: g.labels }
    }
}

fn check_probability(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl LabeledGmm {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>, labels: Vec<Vec<f64>>) -> Result<Self> {
        let g = LabeledGmm { weights, components, labels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture without components"));
        }
        check_dim(self.components.len(), self.weights.len())?;
        check_dim(self.components.len(), self.labels.len())?;
        check_probability(&self.weights, "mixture weights")?;
        let d = self.dim();
        let n_class = self.n_class();
        if n_class == 0 {
            return Err(Error::invalid("label rows must be non-empty"));
        }
        for (c, l) in self.components.iter().zip(&self.labels) {
            check_dim(d, c.dim())?;
            check_dim(d, c.var.len())?;
            check_dim(n_class, l.len())?;
            check_probability(l, "label row")?;
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_class(&self) -> usize {
        self.labels[0].len()
    }

    /// True when both mixtures have the same component count, dimension and
    /// number of classes.
    pub fn congruent(&self, other: &LabeledGmm) -> bool {
        self.n_components() == other.n_components() && self.dim() == other.dim() && self.n_class() == other.n_class()
    }

    /// Mean per-sample log density of `data` under the mixture.
    pub fn log_likelihood(&self, data: &LabeledDataset) -> Result<f64> {
        check_dim(self.dim(), data.dim())?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut buf = vec![0.0; self.n_components()];
        let total: f64 = data
            .features
            .iter()
            .map(|x| {
                for (k, (c, lw)) in self.components.iter().zip(&log_w).enumerate() {
                    buf[k] = lw + c.log_density(x);
                }
                log_sum_exp(&buf)
            })
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Draw `n` labeled points. Each label is the argmax of the drawing
    /// component's label row, lowest class index on ties.
    pub fn sample(&self, n: usize, rng_seed: u64) -> Result<LabeledDataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        let mut rng = seed::rng(rng_seed);
        let cum: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cum.last().unwrap();
        let class_of: Vec<usize> = self.labels.iter().map(|row| argmax(row)).collect();
        let stds: Vec<Vec<f64>> = self.components.iter().map(DiagGaussian::std).collect();
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let k = (0..cum.len())
                .find(|&k| self.weights[k] > 0.0 && u < cum[k])
                .unwrap_or_else(|| self.weights.iter().rposition(|w| *w > 0.0).unwrap());
            let comp = &self.components[k];
            let x: Vec<f64> = comp
                .mean
                .iter()
                .zip(&stds[k])
                .map(|(m, s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * z
                })
                .collect();
            features.push(x);
            labels.push(class_of[k]);
        }
        LabeledDataset::new(features, Some(labels), self.n_class())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Feature matrix with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub n_class: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Option<Vec<usize>>, n_class: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::invalid("dataset has zero features"));
        }
        if n_class == 0 {
            return Err(Error::invalid("n_class must be positive"));
        }
        for row in &features {
            check_dim(d, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite feature value"));
            }
        }
        if let Some(l) = &labels {
            check_dim(features.len(), l.len())?;
            if let Some(bad) = l.iter().find(|&&y| y >= n_class) {
                return Err(Error::invalid(format!("label {bad} out of range for {n_class} classes")));
            }
        }
        Ok(LabeledDataset { features, labels, n_class })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Same features with labels dropped.
    pub fn unlabeled(&self) -> LabeledDataset {
        LabeledDataset { features: self.features.clone(), labels: None, n_class: self.n_class }
    }

    /// Sorted list of classes that have at least one sample.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_class];
        if let Some(l) = &self.labels {
            for &y in l {
                seen[y] = true;
            }
        }
        (0..self.n_class).filter(|&c| seen[c]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_class];
        if let Some(l) = &self.labels {
            for &y in l {
                counts[y] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iter: 200, tol: 1e-6, var_floor: 1e-6, seed: 0 }
    }
}

/// Outcome of an EM fit. `converged` is false when `max_iter` was hit, in
/// which case `gmm` holds the best iterate.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: LabeledGmm,
    pub converged: bool,
    pub iterations: usize,
    /// Mean log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
}

pub(crate) struct EmResult {
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_seeds(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if u < acc && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].to_vec();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Diagonal-covariance EM with k-means++ seeding.
pub(crate) fn fit_em(points: &[&[f64]], k: usize, config: &EmConfig) -> Result<EmResult> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("EM on empty data"));
    }
    if k == 0 {
        return Err(Error::invalid("EM needs at least one component"));
    }
    if n < k {
        return Err(Error::TooFewSamples { got: n, needed: k });
    }
    let d = points[0].len();
    let mut rng = seed::rng(config.seed);

    let mut global_mean = vec![0.0; d];
    for p in points {
        for (g, x) in global_mean.iter_mut().zip(*p) {
            *g += x / n as f64;
        }
    }
    let mut global_var = vec![0.0; d];
    for p in points {
        for ((g, x), m) in global_var.iter_mut().zip(*p).zip(&global_mean) {
            *g += (x - m) * (x - m) / n as f64;
        }
    }
    let init_var: Vec<f64> = global_var.iter().map(|v| v.max(config.var_floor)).collect();

    let mut weights = vec![1.0 / k as f64; k];
    let mut comps: Vec<DiagGaussian> = kmeans_pp_seeds(points, k, &mut rng)
        .into_iter()
        .map(|m| DiagGaussian { mean: m, var: init_var.clone() })
        .collect();

    let mut resp = vec![vec![0.0; k]; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, Vec<f64>, Vec<DiagGaussian>)> = None;

    for _ in 0..config.max_iter {
        // E-step
        let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let mut ll = 0.0;
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            for j in 0..k {
                r[j] = log_w[j] + comps[j].log_density(p);
            }
            let lse = log_sum_exp(r);
            ll += lse;
            for rj in r.iter_mut() {
                *rj = (*rj - lse).exp();
            }
        }
        ll /= n as f64;
        let improved = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if best.as_ref().map_or(true, |(b, _, _)| ll >= *b) {
            best = Some((ll, weights.clone(), comps.clone()));
        }
        if let Some(delta) = improved {
            if delta < config.tol {
                converged = true;
                break;
            }
        }

        // M-step
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk < 1e-12 {
                weights[j] = 0.0;
                continue;
            }
            weights[j] = nk / n as f64;
            let mut mean = vec![0.0; d];
            for (p, r) in points.iter().zip(&resp) {
                for (m, x) in mean.iter_mut().zip(*p) {
                    *m += r[j] * x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for (p, r) in points.iter().zip(&resp) {
                for ((v, x), m) in var.iter_mut().zip(*p).zip(&mean) {
                    *v += r[j] * (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / nk).max(config.var_floor));
            comps[j] = DiagGaussian { mean, var };
        }
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
    }

    let (_, weights, components) = best.expect("at least one EM iteration");
    Ok(EmResult { weights, components, converged, trace })
}

fn one_hot(class: usize, n_class: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_class];
    v[class] = 1.0;
    v
}

/// Fit one EM mixture per class present in `data` and merge them, scaling
/// each class's component weights by its empirical frequency. Label rows are
/// one-hot. A class with fewer samples than `n_comp_per_class` gets one
/// component per sample.
pub fn fit_source_gmm(data: &LabeledDataset, n_comp_per_class: usize, em: &EmConfig) -> Result<GmmFit> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("source data must be labeled"))?;
    if n_comp_per_class == 0 {
        return Err(Error::invalid("n_comp_per_class must be positive"));
    }
    let n = data.len() as f64;
    let mut weights = Vec::new();
    let mut components = Vec::new();
    let mut rows = Vec::new();
    let mut converged = true;
    let mut iterations = 0;
    let mut trace = Vec::new();
    for class in data.present_classes() {
        let pts: Vec<&[f64]> = data
            .features
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == class)
            .map(|(x, _)| x.as_slice())
            .collect();
        let k = n_comp_per_class.min(pts.len());
        let cfg = EmConfig { seed: seed::derive(em.seed, &[seed::STREAM_EM, class as u64]), ..*em };
        let fit = fit_em(&pts, k, &cfg)?;
        converged &= fit.converged;
        iterations = iterations.max(fit.trace.len());
        trace.push(*fit.trace.last().unwrap());
        let freq = pts.len() as f64 / n;
        for (w, c) in fit.weights.into_iter().zip(fit.components) {
            weights.push(w * freq);
            components.push(c);
            rows.push(one_hot(class, data.n_class));
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Ok(GmmFit { gmm: LabeledGmm::new(weights, components, rows)?, converged, iterations, log_likelihood: trace })
}

/// Fit a single unsupervised mixture with `total_components` components.
/// Label rows are uniform.
pub fn fit_target_gmm(data: &LabeledDataset, total_components: usize, em: &EmConfig) -> Result<GmmFit> {
    let pts: Vec<&[f64]> = data.features.iter().map(|x| x.as_slice()).collect();
    let fit = fit_em(&pts, total_components, em)?;
    let uniform = vec![1.0 / data.n_class as f64; data.n_class];
    let rows = vec![uniform; total_components];
    Ok(GmmFit {
        gmm: LabeledGmm::new(fit.weights, fit.components, rows)?,
        converged: fit.converged,
        iterations: fit.trace.len(),
        log_likelihood: fit.trace,
    })
}
