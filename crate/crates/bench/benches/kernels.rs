use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gmmdict_bench::{dictionary, mixture, transport_problem};
use gmmdict_core::barycenter::{gmm_barycenter, BarycenterConfig};
use gmmdict_core::dictionary::client_loss;
use gmmdict_core::eval::{generate_domains, SyntheticSpec};
use gmmdict_core::federation::{fit_domains, run_round};
use gmmdict_core::{FederationConfig, FederationState, LabelPenalty};
use std::hint::black_box;

fn exact_ot(c: &mut Criterion) {
    let mut g = c.benchmark_group("exact_ot");
    for n in [5, 10, 20, 40] {
        let (cost, mu, nu) = transport_problem(n, n, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| gmmdict_core::transport::solve_exact_ot(black_box(&cost), &mu, &nu).unwrap())
        });
    }
    g.finish();
}

fn barycenter(c: &mut Criterion) {
    let mut g = c.benchmark_group("gmm_barycenter");
    let cfg = BarycenterConfig::default();
    for comps in [5, 10, 20] {
        let dict = dictionary(3, comps, 2, 5, 7);
        g.bench_with_input(BenchmarkId::new("k3", comps), &comps, |b, _| {
            b.iter(|| gmm_barycenter(black_box(&dict.atoms), &dict.alpha, &cfg).unwrap())
        });
    }
    g.finish();
}

fn loss_and_gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("client_loss");
    let cfg = BarycenterConfig::default();
    for comps in [5, 10, 20] {
        let dict = dictionary(3, comps, 2, 5, 11);
        let domain = mixture(comps, 2, 5, 99);
        g.bench_with_input(BenchmarkId::new("supervised", comps), &comps, |b, _| {
            b.iter(|| client_loss(black_box(&dict), &domain, true, LabelPenalty::default(), &cfg).unwrap())
        });
    }
    g.finish();
}

fn federation_round(c: &mut Criterion) {
    let mut g = c.benchmark_group("federation_round");
    g.sample_size(20);
    let dom = generate_domains(&SyntheticSpec { samples_per_domain: 200, ..Default::default() }).unwrap();
    for epochs in [1, 5] {
        let cfg = FederationConfig { local_epochs: epochs, ..Default::default() };
        let fits = fit_domains(&dom.sources, Some(&dom.target_train.unlabeled()), &cfg).unwrap();
        let state = FederationState::new(fits.domains, fits.labeled, &cfg).unwrap();
        g.bench_with_input(BenchmarkId::new("synthetic_4_clients", epochs), &epochs, |b, _| {
            b.iter(|| run_round(black_box(&state), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exact_ot, barycenter, loss_and_gradients, federation_round);
criterion_main!(benches);
