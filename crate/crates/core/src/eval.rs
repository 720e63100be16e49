//! Synthetic multi-domain benchmarks, target classifiers and the
//! missing-class ablation.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::gmm_barycenter;
use crate::error::{check_dim, Error, Result};
use crate::federation::{train, FederationConfig, FederationState};
use crate::gmm::LabeledDataset;
use crate::seed;

/// Generator settings for shifted class-conditional Gaussian domains.
///
/// `n_domains` counts source domains; one target domain is generated on top
/// of them, with a training split and a full-class test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_class: usize,
    pub d: usize,
    pub n_domains: usize,
    pub samples_per_domain: usize,
    /// Norm of every domain's mean translation.
    pub shift_scale: f64,
    /// Apply a random orthogonal map per domain before translating.
    pub rotation: bool,
    pub seed: u64,
    /// Distance of the class means from the origin.
    pub class_radius: f64,
    /// Per-axis class standard deviations are drawn from this range.
    pub class_std: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_class: 5,
            d: 2,
            n_domains: 3,
            samples_per_domain: 500,
            shift_scale: 2.0,
            rotation: false,
            seed: 0,
            class_radius: 4.0,
            class_std: (0.5, 0.8),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomains {
    pub sources: Vec<LabeledDataset>,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

fn class_means(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let k = spec.n_class;
    (0..k)
        .map(|c| {
            if spec.d == 1 {
                return vec![spec.class_radius * (c as f64 - (k as f64 - 1.0) / 2.0)];
            }
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            let mut m = vec![spec.class_radius * angle.cos(), spec.class_radius * angle.sin()];
            for _ in 2..spec.d {
                let z: f64 = rng.sample(StandardNormal);
                m.push(0.5 * spec.class_radius * z);
            }
            m
        })
        .collect()
}

struct DomainMap {
    rotation: Option<Vec<Vec<f64>>>,
    shift: Vec<f64>,
}

impl DomainMap {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rotated = match &self.rotation {
            Some(r) => r.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect(),
            None => x.to_vec(),
        };
        rotated.iter().zip(&self.shift).map(|(a, b)| a + b).collect()
    }
}

/// Draw all source domains plus the target's train and test splits.
/// Labels are balanced round-robin over classes.
pub fn generate_domains(spec: &SyntheticSpec) -> Result<SyntheticDomains> {
    if spec.n_class == 0 || spec.d == 0 || spec.n_domains == 0 || spec.samples_per_domain == 0 {
        return Err(Error::invalid("synthetic spec counts must be positive"));
    }
    if !(spec.shift_scale >= 0.0) {
        return Err(Error::invalid("shift_scale must be nonnegative"));
    }
    let mut rng = seed::derived_rng(spec.seed, &[seed::STREAM_DATA]);
    let means = class_means(spec, &mut rng);
    let stds: Vec<Vec<f64>> = (0..spec.n_class)
        .map(|_| (0..spec.d).map(|_| rng.random_range(spec.class_std.0..=spec.class_std.1)).collect())
        .collect();
    let maps: Vec<DomainMap> = (0..=spec.n_domains)
        .map(|_| {
            let rotation = spec.rotation.then(|| random_orthogonal(&mut rng, spec.d));
            let shift = unit_vector(&mut rng, spec.d).into_iter().map(|u| u * spec.shift_scale).collect();
            DomainMap { rotation, shift }
        })
        .collect();
    let draw = |map: &DomainMap, stream: u64| -> Result<LabeledDataset> {
        let mut rng = seed::derived_rng(spec.seed, &[seed::STREAM_DATA, stream]);
        let mut features = Vec::with_capacity(spec.samples_per_domain);
        let mut labels = Vec::with_capacity(spec.samples_per_domain);
        for i in 0..spec.samples_per_domain {
            let c = i % spec.n_class;
            let x: Vec<f64> = means[c]
                .iter()
                .zip(&stds[c])
                .map(|(m, s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * z
                })
                .collect();
            features.push(map.apply(&x));
            labels.push(c);
        }
        LabeledDataset::new(features, Some(labels), spec.n_class)
    };
    let sources = (0..spec.n_domains).map(|i| draw(&maps[i], i as u64 + 1)).collect::<Result<Vec<_>>>()?;
    let target = &maps[spec.n_domains];
    let target_train = draw(target, 1000)?;
    let target_test = draw(target, 2000)?;
    Ok(SyntheticDomains { sources, target_train, target_test })
}

/// Drop every sample of the listed classes. `n_class` is unchanged.
pub fn remove_classes(data: &LabeledDataset, class_set: &[usize]) -> Result<LabeledDataset> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("class removal needs labels"))?;
    if let Some(c) = class_set.iter().find(|&&c| c >= data.n_class) {
        return Err(Error::invalid(format!("class {c} out of range")));
    }
    let (features, kept): (Vec<_>, Vec<_>) = data
        .features
        .iter()
        .zip(labels)
        .filter(|(_, y)| !class_set.contains(y))
        .map(|(x, y)| (x.clone(), *y))
        .unzip();
    if features.is_empty() {
        return Err(Error::invalid("removing these classes leaves no samples"));
    }
    LabeledDataset::new(features, Some(kept), data.n_class)
}

/// Labeled samples from the target client's barycenter.
pub fn virtual_target_dataset(
    state: &FederationState,
    n_samples: usize,
    rng_seed: u64,
    config: &crate::barycenter::BarycenterConfig,
) -> Result<LabeledDataset> {
    let target = state.target().ok_or_else(|| Error::invalid("federation has no target client"))?;
    let d = &target.dictionary;
    let b = gmm_barycenter(&d.atoms, &d.alpha, config)?;
    b.gmm.sample(n_samples, rng_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 500, learning_rate: 0.1, l2: 0.0 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub n_class: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// `n_class` rows of `d + 1` coefficients, bias last.
    weights: Vec<Vec<f64>>,
    /// Training data had a single class; every prediction is that class.
    pub degenerate: bool,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl Classifier {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| (v - c) / s).collect()
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[z.len()])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::gmm::argmax(&self.scores(&self.standardize(x)))
    }

    pub fn classify(&self, features: &[Vec<f64>]) -> Vec<usize> {
        features.iter().map(|x| self.predict(x)).collect()
    }

    /// Fraction of correctly classified test samples.
    pub fn accuracy(&self, test: &LabeledDataset) -> Result<f64> {
        let labels = test.labels.as_ref().ok_or_else(|| Error::invalid("accuracy needs labeled test data"))?;
        check_dim(self.center.len(), test.dim())?;
        let correct = test.features.iter().zip(labels).filter(|(x, y)| self.predict(x) == **y).count();
        Ok(correct as f64 / test.len() as f64)
    }
}

/// Full-batch gradient descent on the mean cross-entropy, from zero weights.
pub fn train_classifier(data: &LabeledDataset, config: &ClassifierConfig) -> Result<Classifier> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("classifier training needs labels"))?;
    let n = data.len() as f64;
    let d = data.dim();
    let k = data.n_class;
    let center: Vec<f64> = (0..d).map(|j| data.features.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = data.features.iter().map(|x| (x[j] - center[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut clf = Classifier { n_class: k, center, scale, weights: vec![vec![0.0; d + 1]; k], degenerate: false };
    let present = data.present_classes();
    if present.len() == 1 {
        clf.degenerate = true;
        clf.weights[present[0]][d] = 1.0;
        return Ok(clf);
    }
    let z: Vec<Vec<f64>> = data.features.iter().map(|x| clf.standardize(x)).collect();
    let mut grad = vec![vec![0.0; d + 1]; k];
    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        for (zi, &yi) in z.iter().zip(labels) {
            let mut p = clf.scores(zi);
            softmax_in_place(&mut p);
            p[yi] -= 1.0;
            for (g, pc) in grad.iter_mut().zip(&p) {
                for j in 0..d {
                    g[j] += pc * zi[j];
                }
                g[d] += pc;
            }
        }
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            for j in 0..=d {
                let reg = if j < d { config.l2 * w[j] } else { 0.0 };
                w[j] -= config.learning_rate * (g[j] / n + reg);
            }
        }
    }
    Ok(clf)
}

/// Everything needed to go from datasets to a target accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub federation: FederationConfig,
    pub classifier: ClassifierConfig,
    pub n_virtual: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { federation: FederationConfig::default(), classifier: ClassifierConfig::default(), n_virtual: 2000 }
    }
}

pub struct PipelineOutcome {
    pub state: FederationState,
    pub virtual_data: LabeledDataset,
    pub classifier: Classifier,
    pub accuracy: f64,
}

/// Train the federation, sample the target barycenter, fit a classifier on
/// the virtual samples and score it on `target_test`.
pub fn run_pipeline(
    sources: &[LabeledDataset],
    target_train: &LabeledDataset,
    target_test: &LabeledDataset,
    config: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let state = train(sources, &target_train.unlabeled(), &config.federation)?;
    finish_pipeline(state, target_test, config)
}

pub fn finish_pipeline(state: FederationState, target_test: &LabeledDataset, config: &PipelineConfig) -> Result<PipelineOutcome> {
    let virtual_seed = seed::derive(config.federation.seed, &[seed::STREAM_VIRTUAL]);
    let virtual_data = virtual_target_dataset(&state, config.n_virtual, virtual_seed, &config.federation.barycenter)?;
    let classifier = train_classifier(&virtual_data, &config.classifier)?;
    let accuracy = classifier.accuracy(target_test)?;
    Ok(PipelineOutcome { state, virtual_data, classifier, accuracy })
}

/// Accuracy on the target of a classifier trained on all sources pooled.
pub fn source_only_accuracy(sources: &[LabeledDataset], target_test: &LabeledDataset, config: &ClassifierConfig) -> Result<f64> {
    let first = sources.first().ok_or_else(|| Error::invalid("no sources"))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for s in sources {
        features.extend(s.features.iter().cloned());
        labels.extend(s.labels.as_ref().ok_or_else(|| Error::invalid("unlabeled source"))?.iter().copied());
    }
    let pooled = LabeledDataset::new(features, Some(labels), first.n_class)?;
    train_classifier(&pooled, config)?.accuracy(target_test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Fractions of classes removed from the target training split.
    pub removal_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { removal_fractions: vec![0.0, 0.2, 0.4], trials: 5, seed: 0 }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("ablation needs at least one trial"));
        }
        if let Some(f) = self.removal_fractions.iter().find(|f| !(**f >= 0.0 && **f < 1.0)) {
            return Err(Error::invalid(format!("removal fraction {f} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Number of classes removed for a fraction, keeping at least one class.
pub fn classes_to_remove(fraction: f64, n_class: usize) -> usize {
    ((fraction * n_class as f64).round() as usize).min(n_class.saturating_sub(1))
}

/// Seeded random subset of `count` classes, sorted.
pub fn pick_classes(n_class: usize, count: usize, rng_seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(rng_seed);
    let mut v = index::sample(&mut rng, n_class, count).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub trial: usize,
    pub removed_classes: Vec<usize>,
    pub accuracy: f64,
    /// Per-class counts of the virtual samples the classifier was trained on.
    pub virtual_class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

/// Federation seed of a trial: trial 0 uses the configured seed unchanged.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    if trial == 0 {
        base
    } else {
        seed::derive(base, &[seed::STREAM_TRIAL, trial as u64])
    }
}

/// Missing-class ablation over already generated domains.
pub fn run_ablation_on(domains: &SyntheticDomains, ablation: &AblationConfig, pipeline: &PipelineConfig) -> Result<AblationReport> {
    ablation.validate()?;
    let n_class = domains.target_train.n_class;
    let cells: Vec<(usize, usize)> = (0..ablation.removal_fractions.len())
        .flat_map(|f| (0..ablation.trials).map(move |t| (f, t)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(fi, trial)| {
            let fraction = ablation.removal_fractions[fi];
            let count = classes_to_remove(fraction, n_class);
            let removed = pick_classes(n_class, count, seed::derive(ablation.seed, &[seed::STREAM_REMOVAL, fi as u64, trial as u64]));
            let reduced = remove_classes(&domains.target_train, &removed)?;
            let mut cfg = *pipeline;
            cfg.federation.seed = trial_seed(pipeline.federation.seed, trial);
            let out = run_pipeline(&domains.sources, &reduced, &domains.target_test, &cfg)?;
            Ok(AblationRow {
                fraction,
                trial,
                removed_classes: removed,
                accuracy: out.accuracy,
                virtual_class_counts: out.virtual_data.class_counts(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = ablation
        .removal_fractions
        .iter()
        .map(|&fraction| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.fraction == fraction).map(|r| r.accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AblationSummary { fraction, mean, std }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}

/// Generate the synthetic benchmark and run the ablation on it. Source data
/// and the target test split are never modified.
pub fn run_ablation(spec: &SyntheticSpec, ablation: &AblationConfig, pipeline: &PipelineConfig) -> Result<AblationReport> {
    run_ablation_on(&generate_domains(spec)?, ablation, pipeline)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shift_means_identical_distributions() {
        let spec = SyntheticSpec { shift_scale: 0.0, ..Default::default() };
        let d = generate_domains(&spec).unwrap();
        let mean = |ds: &LabeledDataset, j: usize| ds.features.iter().map(|x| x[j]).sum::<f64>() / ds.len() as f64;
        for s in &d.sources {
            for j in 0..2 {
                assert!((mean(s, j) - mean(&d.target_train, j)).abs() < 0.3);
            }
        }
    }

    #[test]
    fn target_test_has_every_class() {
        let d = generate_domains(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.target_test.present_classes(), vec![0, 1, 2, 3, 4]);
        assert_eq!(d.sources.len(), 3);
    }

    #[test]
    fn seeds_change_shifts() {
        let a = generate_domains(&SyntheticSpec { seed: 1, ..Default::default() }).unwrap();
        let b = generate_domains(&SyntheticSpec { seed: 2, ..Default::default() }).unwrap();
        assert_ne!(a.sources[0].features[0], b.sources[0].features[0]);
        let a2 = generate_domains(&SyntheticSpec { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a.target_test, a2.target_test);
    }

    #[test]
    fn rotation_preserves_class_spread() {
        let spec = SyntheticSpec { rotation: true, shift_scale: 0.0, d: 3, ..Default::default() };
        let d = generate_domains(&spec).unwrap();
        let norm2 = |ds: &LabeledDataset| ds.features.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / ds.len() as f64;
        let base = norm2(&d.sources[0]);
        assert!((norm2(&d.target_train) - base).abs() / base < 0.1);
    }

    #[test]
    fn class_removal_bookkeeping() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let data = LabeledDataset::new(x, Some(vec![0, 1, 0, 1]), 2).unwrap();
        assert_eq!(remove_classes(&data, &[]).unwrap(), data);
        let r = remove_classes(&data, &[0]).unwrap();
        assert_eq!(r.labels, Some(vec![1, 1]));
        assert_eq!(r.n_class, 2);
        assert_eq!(r.len(), data.len() - 2);
        assert!(remove_classes(&data, &[0, 1]).is_err());
        assert!(remove_classes(&data, &[5]).is_err());
    }

    #[test]
    fn separable_data_is_learned() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let data = LabeledDataset::new(x, Some(y), 2).unwrap();
        let clf = train_classifier(&data, &ClassifierConfig::default()).unwrap();
        assert_eq!(clf.accuracy(&data).unwrap(), 1.0);
        assert!(!clf.degenerate);
        assert_eq!(clf, train_classifier(&data, &ClassifierConfig::default()).unwrap());
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = seed::rng(3);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
            let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
            LabeledDataset::new(x, Some(y), 2).unwrap()
        };
        let train = mk(&mut rng, 400);
        let test = mk(&mut rng, 400);
        let acc = train_classifier(&train, &ClassifierConfig::default()).unwrap().accuracy(&test).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn single_class_training_is_flagged() {
        let data = LabeledDataset::new(vec![vec![0.0], vec![1.0]], Some(vec![1, 1]), 3).unwrap();
        let clf = train_classifier(&data, &ClassifierConfig::default()).unwrap();
        assert!(clf.degenerate);
        assert_eq!(clf.classify(&[vec![5.0], vec![-5.0]]), vec![1, 1]);
    }

    #[test]
    fn removal_counts() {
        assert_eq!(classes_to_remove(0.0, 5), 0);
        assert_eq!(classes_to_remove(0.4, 5), 2);
        assert_eq!(classes_to_remove(0.99, 5), 4);
        let picked = pick_classes(5, 2, 9);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked, pick_classes(5, 2, 9));
        assert!(AblationConfig { removal_fractions: vec![1.0], ..Default::default() }.validate().is_err());
    }
}
