//! Round-synchronous, serverless gossip over dictionary atoms.
//!
//! At every round each client reads its peers' atoms from a snapshot taken
//! at the start of the round, replaces or averages its own atoms, then runs
//! a few local projected-gradient steps on its own mixture. Only atoms ever
//! cross a client boundary: [`AtomPayload`] has no coordinate field.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{gmm_barycenter, BarycenterConfig, BarycentricCoords};
use crate::dictionary::{apply_gradients, client_loss, init_dictionary, Dictionary, LossKind, StepConfig};
use crate::error::{Error, Result};
use crate::gmm::{fit_source_gmm, fit_target_gmm, EmConfig, LabeledDataset, LabeledGmm};
use crate::seed;
use crate::transport::LabelPenalty;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Overwrite local atoms with one random peer's atoms.
    Replacement,
    /// Average local atoms with two random peers' atoms.
    Aggregation,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Replacement => "replacement",
            Strategy::Aggregation => "aggregation",
        })
    }
}

/// Hyperparameters of a federated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_atoms: usize,
    pub comps_per_class: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub strategy: Strategy,
    pub label_penalty: LabelPenalty,
    pub var_floor: f64,
    pub seed: u64,
    /// Start every client from the same atoms instead of per-client draws.
    pub shared_init: bool,
    pub barycenter: BarycenterConfig,
    pub em: EmConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_atoms: 3,
            comps_per_class: 1,
            rounds: 100,
            local_epochs: 5,
            eta: 0.05,
            strategy: Strategy::Aggregation,
            label_penalty: LabelPenalty::default(),
            var_floor: 1e-6,
            seed: 0,
            shared_init: false,
            barycenter: BarycenterConfig::default(),
            em: EmConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn step(&self) -> StepConfig {
        StepConfig {
            eta: self.eta,
            label_penalty: self.label_penalty,
            var_floor: self.var_floor,
            barycenter: self.barycenter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub dictionary: Dictionary,
    pub domain: LabeledGmm,
    pub is_labeled: bool,
    /// Loss before the first round, then the loss at the end of every round.
    pub loss_history: Vec<f64>,
    pub last_loss_kind: Option<LossKind>,
}

/// One atom transfer, `sender`'s atoms read by `receiver` at `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
}

/// What one client publishes to its peers at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomPayload {
    pub round: usize,
    pub sender: usize,
    pub atoms: Vec<LabeledGmm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub clients: Vec<ClientState>,
    /// Number of completed rounds.
    pub round: usize,
    pub strategy: Strategy,
    pub rng_seed: u64,
    pub exchange_log: Vec<Exchange>,
}

impl FederationState {
    /// Build a federation from fitted mixtures. `labeled[i]` says whether
    /// client `i` uses the supervised loss. At most one client may be
    /// unlabeled.
    pub fn new(domains: Vec<LabeledGmm>, labeled: Vec<bool>, config: &FederationConfig) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::invalid("a federation needs at least two clients"));
        }
        if domains.len() != labeled.len() {
            return Err(Error::invalid("one label flag per client expected"));
        }
        if labeled.iter().filter(|l| !**l).count() > 1 {
            return Err(Error::invalid("at most one unlabeled (target) client is supported"));
        }
        let d = domains[0].dim();
        let n_class = domains[0].n_class();
        if domains.iter().any(|g| g.dim() != d || g.n_class() != n_class) {
            return Err(Error::Congruence("client mixtures disagree on dimension or class count".into()));
        }
        let c = n_class * config.comps_per_class;
        let step = config.step();
        let clients = domains
            .into_iter()
            .zip(labeled)
            .enumerate()
            .map(|(id, (domain, is_labeled))| {
                let init_id = if config.shared_init { 0 } else { id as u64 };
                let dictionary =
                    init_dictionary(config.n_atoms, c, d, n_class, seed::derive(config.seed, &[seed::STREAM_ATOM_INIT, init_id]))?;
                let r = client_loss(&dictionary, &domain, is_labeled, step.label_penalty, &step.barycenter)?;
                Ok(ClientState {
                    id,
                    dictionary,
                    domain,
                    is_labeled,
                    loss_history: vec![r.value],
                    last_loss_kind: Some(r.kind),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FederationState { clients, round: 0, strategy: config.strategy, rng_seed: config.seed, exchange_log: Vec::new() })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn target(&self) -> Option<&ClientState> {
        self.clients.iter().find(|c| !c.is_labeled)
    }

    /// Check that every dictionary has the same shape.
    pub fn validate(&self) -> Result<()> {
        let first = &self.clients[0].dictionary;
        for c in &self.clients {
            c.dictionary.validate()?;
            if !first.congruent(&c.dictionary.atoms) {
                return Err(Error::Congruence(format!("client {} dictionary shape differs", c.id)));
            }
        }
        Ok(())
    }

    pub fn payload(&self, client: usize) -> AtomPayload {
        AtomPayload { round: self.round + 1, sender: client, atoms: self.clients[client].dictionary.atoms.clone() }
    }
}

/// Distinct uniformly random peers of `client_id`, keyed by
/// `(rng_seed, upcoming round, client_id)`.
pub fn select_peers(state: &FederationState, client_id: usize, count: usize) -> Result<Vec<usize>> {
    let n = state.n_clients();
    if n < count + 1 {
        return Err(Error::invalid(format!("{n} clients cannot supply {count} distinct peers")));
    }
    let mut rng = seed::derived_rng(state.rng_seed, &[seed::STREAM_PEERS, (state.round + 1) as u64, client_id as u64]);
    Ok(index::sample(&mut rng, n - 1, count)
        .into_iter()
        .map(|i| if i >= client_id { i + 1 } else { i })
        .collect())
}

/// Overwrite the receiver's atoms; coordinates stay put.
pub fn exchange_replacement(receiver: &Dictionary, sender_atoms: &[LabeledGmm]) -> Result<Dictionary> {
    if !receiver.congruent(sender_atoms) {
        return Err(Error::Congruence("received atoms do not match the local dictionary".into()));
    }
    Ok(Dictionary { atoms: sender_atoms.to_vec(), alpha: receiver.alpha.clone() })
}

/// Replace each atom by the uniform barycenter of the local atom and the two
/// received atoms with the same index.
pub fn exchange_aggregation(
    own: &Dictionary,
    atoms_1: &[LabeledGmm],
    atoms_2: &[LabeledGmm],
    config: &BarycenterConfig,
) -> Result<Dictionary> {
    if !own.congruent(atoms_1) || !own.congruent(atoms_2) {
        return Err(Error::Congruence("received atoms do not match the local dictionary".into()));
    }
    let third = BarycentricCoords::uniform(3);
    let atoms = own
        .atoms
        .iter()
        .zip(atoms_1)
        .zip(atoms_2)
        .map(|((a, b), c)| Ok(gmm_barycenter(&[a.clone(), b.clone(), c.clone()], &third, config)?.gmm))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dictionary { atoms, alpha: own.alpha.clone() })
}

struct ClientUpdate {
    client: ClientState,
    exchanges: Vec<Exchange>,
}

fn update_client(
    state: &FederationState,
    snapshot: &[AtomPayload],
    id: usize,
    config: &FederationConfig,
) -> Result<ClientUpdate> {
    let t = state.round + 1;
    let mut client = state.clients[id].clone();
    let (dictionary, peers) = match state.strategy {
        Strategy::Replacement => {
            let peers = select_peers(state, id, 1)?;
            (exchange_replacement(&client.dictionary, &snapshot[peers[0]].atoms)?, peers)
        }
        Strategy::Aggregation => {
            let peers = select_peers(state, id, 2)?;
            let d = exchange_aggregation(
                &client.dictionary,
                &snapshot[peers[0]].atoms,
                &snapshot[peers[1]].atoms,
                &config.barycenter,
            )?;
            (d, peers)
        }
    };
    let step = config.step();
    let mut dict = dictionary;
    for _ in 0..config.local_epochs {
        let r = client_loss(&dict, &client.domain, client.is_labeled, step.label_penalty, &step.barycenter)?;
        dict = apply_gradients(&dict, &r, step.eta, step.var_floor)?;
    }
    let r = client_loss(&dict, &client.domain, client.is_labeled, step.label_penalty, &step.barycenter)?;
    client.dictionary = dict;
    client.loss_history.push(r.value);
    client.last_loss_kind = Some(r.kind);
    let exchanges = peers.into_iter().map(|sender| Exchange { round: t, sender, receiver: id }).collect();
    Ok(ClientUpdate { client, exchanges })
}

/// Advance the federation by one round. Clients are processed in parallel
/// against the round-start snapshot; the result does not depend on the
/// scheduling.
pub fn run_round(state: &FederationState, config: &FederationConfig) -> Result<FederationState> {
    let snapshot: Vec<AtomPayload> = (0..state.n_clients()).map(|i| state.payload(i)).collect();
    let updates = (0..state.n_clients())
        .into_par_iter()
        .map(|id| update_client(state, &snapshot, id, config))
        .collect::<Result<Vec<_>>>()?;
    let mut next = FederationState {
        clients: Vec::with_capacity(updates.len()),
        round: state.round + 1,
        strategy: state.strategy,
        rng_seed: state.rng_seed,
        exchange_log: state.exchange_log.clone(),
    };
    for u in updates {
        next.clients.push(u.client);
        next.exchange_log.extend(u.exchanges);
    }
    Ok(next)
}

/// Run `config.rounds` rounds, calling `observe` on the initial state and
/// after every round.
pub fn run_rounds(
    mut state: FederationState,
    config: &FederationConfig,
    mut observe: impl FnMut(&FederationState) -> Result<()>,
) -> Result<FederationState> {
    observe(&state)?;
    for _ in 0..config.rounds {
        state = run_round(&state, config)?;
        observe(&state)?;
    }
    Ok(state)
}

/// Fitted client mixtures in client order.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDomains {
    pub domains: Vec<LabeledGmm>,
    pub labeled: Vec<bool>,
    /// Whether every EM run behind each mixture converged.
    pub em_converged: Vec<bool>,
}

/// Fit every client's mixture: sources per class, the target unsupervised.
pub fn fit_domains(sources: &[LabeledDataset], target: Option<&LabeledDataset>, config: &FederationConfig) -> Result<FittedDomains> {
    let mut fits = FittedDomains { domains: Vec::new(), labeled: Vec::new(), em_converged: Vec::new() };
    for (i, s) in sources.iter().enumerate() {
        let em = EmConfig { seed: seed::derive(config.seed, &[seed::STREAM_EM, i as u64]), ..config.em };
        let fit = fit_source_gmm(s, config.comps_per_class, &em)?;
        fits.domains.push(fit.gmm);
        fits.labeled.push(true);
        fits.em_converged.push(fit.converged);
    }
    if let Some(t) = target {
        let n_class = sources.first().map_or(t.n_class, |s| s.n_class);
        if t.n_class != n_class {
            return Err(Error::invalid("target and sources disagree on the number of classes"));
        }
        let em = EmConfig { seed: seed::derive(config.seed, &[seed::STREAM_EM, sources.len() as u64]), ..config.em };
        let fit = fit_target_gmm(&t.unlabeled(), n_class * config.comps_per_class, &em)?;
        fits.domains.push(fit.gmm);
        fits.labeled.push(false);
        fits.em_converged.push(fit.converged);
    }
    Ok(fits)
}

/// Full pipeline: fit mixtures, initialize dictionaries, run all rounds.
/// The target is the last client.
pub fn train(sources: &[LabeledDataset], target: &LabeledDataset, config: &FederationConfig) -> Result<FederationState> {
    train_observed(sources, target, config, |_| Ok(()))
}

pub fn train_observed(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    config: &FederationConfig,
    observe: impl FnMut(&FederationState) -> Result<()>,
) -> Result<FederationState> {
    if sources.len() < 2 {
        return Err(Error::invalid("at least two source datasets are required"));
    }
    let fits = fit_domains(sources, Some(target), config)?;
    let state = FederationState::new(fits.domains, fits.labeled, config)?;
    run_rounds(state, config, observe)
}

/// Federation of labeled source clients only, with no target.
pub fn train_sources_only(sources: &[LabeledDataset], config: &FederationConfig) -> Result<FederationState> {
    let fits = fit_domains(sources, None, config)?;
    let state = FederationState::new(fits.domains, fits.labeled, config)?;
    run_rounds(state, config, |_| Ok(()))
}
