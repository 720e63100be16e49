use gmmdict_core::analysis::{envelope_study, EnvelopeConfig};
use gmmdict_core::dictionary::LossKind;
use gmmdict_core::eval::*;
use gmmdict_core::federation::*;
use gmmdict_core::gmm::{fit_source_gmm, fit_target_gmm};
use gmmdict_core::transport::mw2_sq;
use gmmdict_core::{io, EmConfig, LabeledDataset};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { samples_per_domain: 200, ..Default::default() }
}

fn short(rounds: usize) -> FederationConfig {
    FederationConfig { rounds, ..Default::default() }
}

#[test]
fn every_client_improves_on_the_synthetic_benchmark() {
    let dom = generate_domains(&small_spec()).unwrap();
    let state = train(&dom.sources, &dom.target_train.unlabeled(), &short(30)).unwrap();
    assert_eq!(state.round, 30);
    for c in &state.clients {
        assert_eq!(c.loss_history.len(), 31);
        assert!(c.loss_history[30] < c.loss_history[0], "client {}: {:?}", c.id, c.loss_history);
    }
    let target = state.target().unwrap();
    assert!(!target.is_labeled);
    assert_eq!(target.last_loss_kind, Some(LossKind::Unsupervised));
    for c in &state.clients[..3] {
        assert_eq!(c.last_loss_kind, Some(LossKind::Supervised));
    }
}

#[test]
fn zero_rounds_returns_the_initial_state() {
    let dom = generate_domains(&small_spec()).unwrap();
    let cfg = short(0);
    let state = train(&dom.sources, &dom.target_train.unlabeled(), &cfg).unwrap();
    let fits = fit_domains(&dom.sources, Some(&dom.target_train.unlabeled()), &cfg).unwrap();
    assert_eq!(fits.em_converged.len(), 4);
    let fresh = FederationState::new(fits.domains, fits.labeled, &cfg).unwrap();
    assert_eq!(state, fresh);
    assert!(state.exchange_log.is_empty());
}

#[test]
fn training_is_reproducible() {
    let dom = generate_domains(&small_spec()).unwrap();
    for strategy in [Strategy::Replacement, Strategy::Aggregation] {
        let cfg = FederationConfig { strategy, seed: 9, ..short(8) };
        let a = train(&dom.sources, &dom.target_train.unlabeled(), &cfg).unwrap();
        let b = train(&dom.sources, &dom.target_train.unlabeled(), &cfg).unwrap();
        assert_eq!(a.exchange_log, b.exchange_log);
        assert_eq!(a, b);
        let other = train(&dom.sources, &dom.target_train.unlabeled(), &FederationConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.exchange_log, other.exchange_log);
    }
}

#[test]
fn replacement_logs_one_exchange_per_client_and_round() {
    let dom = generate_domains(&small_spec()).unwrap();
    let cfg = FederationConfig { strategy: Strategy::Replacement, ..short(5) };
    let state = train(&dom.sources, &dom.target_train.unlabeled(), &cfg).unwrap();
    assert_eq!(state.exchange_log.len(), 5 * 4);
    assert!(state.exchange_log.iter().all(|e| e.sender != e.receiver));
    let agg = train(&dom.sources, &dom.target_train.unlabeled(), &FederationConfig { strategy: Strategy::Aggregation, ..cfg }).unwrap();
    assert_eq!(agg.exchange_log.len(), 5 * 4 * 2);
}

#[test]
fn ablation_leaves_inputs_untouched_and_scores_are_fractions() {
    let dom = generate_domains(&small_spec()).unwrap();
    let before = dom.clone();
    let pipeline = PipelineConfig { federation: short(5), n_virtual: 300, ..Default::default() };
    let ablation = AblationConfig { removal_fractions: vec![0.0, 0.2, 0.4], trials: 2, seed: 4 };
    let report = run_ablation_on(&dom, &ablation, &pipeline).unwrap();
    assert_eq!(dom, before);
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.summary.len(), 3);
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.removed_classes.len(), classes_to_remove(r.fraction, 5));
        assert_eq!(r.virtual_class_counts.iter().sum::<usize>(), 300);
    }
}

#[test]
fn unshifted_domains_fit_to_nearby_mixtures() {
    let spec = SyntheticSpec { shift_scale: 0.0, samples_per_domain: 1000, ..Default::default() };
    let dom = generate_domains(&spec).unwrap();
    let em = EmConfig::default();
    let source = fit_source_gmm(&dom.sources[0], 1, &em).unwrap().gmm;
    let target = fit_target_gmm(&dom.target_train.unlabeled(), 5, &em).unwrap().gmm;
    let shifted = generate_domains(&SyntheticSpec { shift_scale: 2.0, ..spec }).unwrap();
    let far = fit_target_gmm(&shifted.target_train.unlabeled(), 5, &em).unwrap().gmm;
    let near = mw2_sq(&source, &target).unwrap().0;
    assert!(near < 0.1, "{near}");
    assert!(near < mw2_sq(&source, &far).unwrap().0);
}

#[test]
fn envelope_rows_follow_the_requested_sets() {
    let dom = generate_domains(&small_spec()).unwrap();
    let sources = train_sources_only(&dom.sources, &short(5)).unwrap();
    assert!(sources.target().is_none());
    let cfg = EnvelopeConfig { iterations: 30, n_virtual: 200, ..Default::default() };
    let report = envelope_study(&sources, &dom.target_train, &dom.target_test, &[vec![2], vec![2, 4]], &cfg).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows[0].removed_classes.is_empty());
    assert_eq!(report.rows[2].removed_classes, vec![2, 4]);
    for r in &report.rows {
        assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.mw2_loss >= 0.0);
    }
    assert!(envelope_study(&sources, &dom.target_train, &dom.target_test, &[], &EnvelopeConfig { atom_client: 7, ..cfg }).is_err());
}

#[test]
fn csv_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dom = generate_domains(&small_spec()).unwrap();
    let path = dir.path().join("source.csv");
    let mut w = io::create(&path).unwrap();
    io::write_dataset_csv(&mut w, &dom.sources[0]).unwrap();
    drop(w);
    let back: LabeledDataset = io::read_dataset_csv(&path, Some(5)).unwrap();
    assert_eq!(back, dom.sources[0]);
}

#[test]
fn shared_initialization_starts_in_consensus() {
    use gmmdict_core::analysis::{make_weight_grid, pairwise_discrepancy};
    let dom = generate_domains(&small_spec()).unwrap();
    let cfg = FederationConfig { shared_init: true, ..short(0) };
    let state = train(&dom.sources, &dom.target_train.unlabeled(), &cfg).unwrap();
    let entry = pairwise_discrepancy(&state, &make_weight_grid(3, 4).unwrap(), &cfg.barycenter).unwrap();
    assert_eq!(entry.pairs.len(), 6);
    assert!(entry.max_gap() < 1e-9);
}
