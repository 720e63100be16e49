use gmmdict_core::{DiagGaussian, LabeledGmm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn probability(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> DiagGaussian {
    let mean = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
    let var = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
    DiagGaussian::new(mean, var).unwrap()
}

/// Random labeled mixture with interior label rows.
pub fn gmm(rng: &mut ChaCha8Rng, c: usize, d: usize, n_class: usize) -> LabeledGmm {
    let weights = probability(rng, c);
    let components = (0..c).map(|_| gaussian(rng, d, 3.0)).collect();
    let labels = (0..c).map(|_| probability(rng, n_class)).collect();
    LabeledGmm::new(weights, components, labels).unwrap()
}

/// Same as [`gmm`] with uniform weights.
pub fn uniform_gmm(rng: &mut ChaCha8Rng, c: usize, d: usize, n_class: usize) -> LabeledGmm {
    let mut g = gmm(rng, c, d, n_class);
    g.weights = vec![1.0 / c as f64; c];
    g
}
