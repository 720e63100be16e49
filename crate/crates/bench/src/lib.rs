//! Fixtures shared by the benchmarks.

use gmmdict_core::barycenter::BarycentricCoords;
use gmmdict_core::{seed, CostMatrix, DiagGaussian, Dictionary, LabeledGmm};
use rand::Rng;

/// Random cost matrix with uniform marginals.
pub fn transport_problem(m: usize, n: usize, rng_seed: u64) -> (CostMatrix, Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(rng_seed);
    let cost = (0..m).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    (CostMatrix(cost), vec![1.0 / m as f64; m], vec![1.0 / n as f64; n])
}

/// Mixture with `c` components in `d` dimensions and one-hot labels cycling
/// through `n_class` classes.
pub fn mixture(c: usize, d: usize, n_class: usize, rng_seed: u64) -> LabeledGmm {
    let mut rng = seed::rng(rng_seed);
    let components = (0..c)
        .map(|_| {
            let mean = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let var = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
            DiagGaussian::new(mean, var).expect("positive variances")
        })
        .collect();
    let labels = (0..c)
        .map(|j| (0..n_class).map(|k| if k == j % n_class { 1.0 } else { 0.0 }).collect())
        .collect();
    LabeledGmm::new(vec![1.0 / c as f64; c], components, labels).expect("valid mixture")
}

pub fn dictionary(k: usize, c: usize, d: usize, n_class: usize, rng_seed: u64) -> Dictionary {
    let atoms = (0..k).map(|i| mixture(c, d, n_class, rng_seed.wrapping_add(i as u64))).collect();
    Dictionary::new(atoms, BarycentricCoords::uniform(k)).expect("congruent atoms")
}
