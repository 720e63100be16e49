//! Batch experiments over the federated dictionary learner: configuration,
//! orchestration and file export.

mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gmmdict_core::analysis::{envelope_study, make_weight_grid, pairwise_discrepancy, ConsensusEntry};
use gmmdict_core::barycenter::gmm_barycenter;
use gmmdict_core::eval::{
    classes_to_remove, finish_pipeline, generate_domains, pick_classes, run_ablation_on, source_only_accuracy, virtual_target_dataset,
    PipelineConfig,
};
use gmmdict_core::federation::{fit_domains, run_rounds, train_sources_only};
use gmmdict_core::{io, seed, Dictionary, ErrorKind, FederationState, LabeledDataset, SyntheticDomains};
use serde::Serialize;

pub use config::{ConsensusOptions, CsvSource, DataSource, EnvelopeOptions, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "gmmdict", version, about = "Federated dictionary learning over labeled Gaussian mixtures")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fail with exit code 4 when EM or a barycenter does not converge.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the federation; write dictionaries, loss trace and virtual samples.
    Train,
    /// Train and record the pairwise consensus gap after every round.
    Consensus,
    /// Missing-class ablation over removal fractions and trials.
    Ablate,
    /// Re-fit target coordinates over frozen source atoms.
    Envelope,
    /// Sample from the barycenter of a saved dictionary.
    Sample {
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        n: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gmmdict_core::Error> for CliError {
    fn from(e: gmmdict_core::Error) -> Self {
        match e.kind() {
            ErrorKind::Data => CliError::Data(e.to_string()),
            ErrorKind::Numerical => CliError::Numerical(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Files written by one command, in order of creation.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(Outputs { dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> gmmdict_core::Result<()>) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut w = io::create(&path)?;
        body(&mut w)?;
        w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, |w| io::write_json(w, value))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: Option<&'a ExperimentConfig>,
    seeds: serde_json::Value,
    outputs: Vec<String>,
}

fn write_manifest(out: &mut Outputs, command: &'static str, config: Option<&ExperimentConfig>, seeds: serde_json::Value) -> CliResult<()> {
    let mut outputs = out.written.clone();
    outputs.push("manifest.json".into());
    let manifest = Manifest { tool: "gmmdict", version: env!("CARGO_PKG_VERSION"), command, config, seeds, outputs };
    out.json("manifest.json", &manifest)
}

struct Data {
    sources: Vec<LabeledDataset>,
    target_train: LabeledDataset,
    target_test: Option<LabeledDataset>,
}

impl Data {
    fn test(&self, command: &str) -> CliResult<&LabeledDataset> {
        self.target_test.as_ref().ok_or_else(|| CliError::Config(format!("`{command}` needs a labeled target_test split")))
    }

    fn labeled_target(&self, command: &str) -> CliResult<&LabeledDataset> {
        if self.target_train.labels.is_none() {
            return Err(CliError::Data(format!("`{command}` removes target classes and needs labels in target_train")));
        }
        Ok(&self.target_train)
    }

    fn domains(&self, command: &str) -> CliResult<SyntheticDomains> {
        Ok(SyntheticDomains {
            sources: self.sources.clone(),
            target_train: self.labeled_target(command)?.clone(),
            target_test: self.test(command)?.clone(),
        })
    }
}

fn with_class_count(data: LabeledDataset, n_class: usize, path: &Path) -> CliResult<LabeledDataset> {
    LabeledDataset::new(data.features, data.labels, n_class).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let d = generate_domains(spec).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Data { sources: d.sources, target_train: d.target_train, target_test: Some(d.target_test) })
        }
        DataSource::Csv(csv) => {
            let mut sources = Vec::with_capacity(csv.sources.len());
            for p in &csv.sources {
                let s = io::read_dataset_csv(p, csv.n_class)?;
                if s.labels.is_none() {
                    return Err(CliError::Data(format!("{}: source data needs a label column", p.display())));
                }
                sources.push(s);
            }
            let n_class = csv.n_class.unwrap_or_else(|| sources.iter().map(|s| s.n_class).max().unwrap_or(1));
            let sources = sources
                .into_iter()
                .zip(&csv.sources)
                .map(|(s, p)| with_class_count(s, n_class, p))
                .collect::<CliResult<Vec<_>>>()?;
            let target_train = with_class_count(io::read_dataset_csv(&csv.target_train, Some(n_class))?, n_class, &csv.target_train)?;
            let target_test = match &csv.target_test {
                Some(p) => {
                    let t = io::read_dataset_csv(p, Some(n_class))?;
                    if t.labels.is_none() {
                        return Err(CliError::Data(format!("{}: target_test needs a label column", p.display())));
                    }
                    Some(t)
                }
                None => None,
            };
            let d = sources[0].dim();
            for (s, p) in sources.iter().zip(&csv.sources) {
                if s.dim() != d {
                    return Err(CliError::Data(format!("{}: {} features, expected {d}", p.display(), s.dim())));
                }
            }
            if target_train.dim() != d || target_test.as_ref().is_some_and(|t| t.dim() != d) {
                return Err(CliError::Data(format!("target features do not have dimension {d}")));
            }
            Ok(Data { sources, target_train, target_test })
        }
    }
}

fn warn_or_fail(strict: bool, msg: String) -> CliResult<()> {
    if strict {
        Err(CliError::Numerical(msg))
    } else {
        eprintln!("warning: {msg}");
        Ok(())
    }
}

fn train_federation(
    cfg: &ExperimentConfig,
    data: &Data,
    strict: bool,
    observe: impl FnMut(&FederationState) -> gmmdict_core::Result<()>,
) -> CliResult<FederationState> {
    let fits = fit_domains(&data.sources, Some(&data.target_train.unlabeled()), &cfg.federation)?;
    for (i, ok) in fits.em_converged.iter().enumerate() {
        if !ok {
            warn_or_fail(strict, format!("EM for client {i} stopped at the iteration cap"))?;
        }
    }
    let state = FederationState::new(fits.domains, fits.labeled, &cfg.federation)?;
    let state = run_rounds(state, &cfg.federation, observe)?;
    check_state(&state, cfg, strict)?;
    Ok(state)
}

fn check_state(state: &FederationState, cfg: &ExperimentConfig, strict: bool) -> CliResult<()> {
    for c in &state.clients {
        if let Some(l) = c.loss_history.iter().find(|l| !l.is_finite()) {
            return Err(CliError::Numerical(format!("client {} reached a non-finite loss {l}", c.id)));
        }
        let b = gmm_barycenter(&c.dictionary.atoms, &c.dictionary.alpha, &cfg.federation.barycenter)?;
        if !b.converged {
            warn_or_fail(strict, format!("barycenter of client {} did not converge", c.id))?;
        }
    }
    Ok(())
}

fn federation_seeds(cfg: &ExperimentConfig, n_clients: usize) -> serde_json::Value {
    let s = cfg.federation.seed;
    let init: Vec<u64> = (0..n_clients)
        .map(|i| seed::derive(s, &[seed::STREAM_ATOM_INIT, if cfg.federation.shared_init { 0 } else { i as u64 }]))
        .collect();
    serde_json::json!({
        "master": cfg.seed,
        "em": (0..n_clients).map(|i| seed::derive(s, &[seed::STREAM_EM, i as u64])).collect::<Vec<_>>(),
        "atom_init": init,
        "virtual_samples": seed::derive(s, &[seed::STREAM_VIRTUAL]),
        "peers": "derive(master, [2, round, client])",
    })
}

#[derive(Serialize)]
struct Metrics {
    rounds: usize,
    final_loss: Vec<f64>,
    accuracy: Option<f64>,
    source_only_accuracy: Option<f64>,
    classifier_degenerate: Option<bool>,
}

fn write_training(out: &mut Outputs, cfg: &ExperimentConfig, data: &Data, state: FederationState) -> CliResult<()> {
    for c in &state.clients {
        out.json(&format!("dictionary_client_{}.json", c.id), &c.dictionary)?;
    }
    out.write("loss_trace.csv", |w| io::write_loss_trace(w, &state))?;
    let final_loss = state.clients.iter().map(|c| *c.loss_history.last().expect("initial loss")).collect();
    let rounds = state.round;
    let pipeline = PipelineConfig { federation: cfg.federation, classifier: cfg.classifier, n_virtual: cfg.n_virtual };
    let (virtual_data, metrics) = match &data.target_test {
        Some(test) => {
            let o = finish_pipeline(state, test, &pipeline)?;
            let baseline = source_only_accuracy(&data.sources, test, &cfg.classifier)?;
            let m = Metrics {
                rounds,
                final_loss,
                accuracy: Some(o.accuracy),
                source_only_accuracy: Some(baseline),
                classifier_degenerate: Some(o.classifier.degenerate),
            };
            (o.virtual_data, m)
        }
        None => {
            let v = virtual_target_dataset(
                &state,
                cfg.n_virtual,
                seed::derive(cfg.federation.seed, &[seed::STREAM_VIRTUAL]),
                &cfg.federation.barycenter,
            )?;
            (v, Metrics { rounds, final_loss, accuracy: None, source_only_accuracy: None, classifier_degenerate: None })
        }
    };
    out.write("virtual_samples.csv", |w| io::write_dataset_csv(w, &virtual_data))?;
    out.write("joint_samples.csv", |w| io::write_joint_csv(w, &data.target_train, &virtual_data))?;
    out.json("metrics.json", &metrics)
}

fn cmd_train(cfg: &ExperimentConfig, out: &mut Outputs, strict: bool) -> CliResult<()> {
    let data = load_data(cfg)?;
    let state = train_federation(cfg, &data, strict, |_| Ok(()))?;
    let seeds = federation_seeds(cfg, state.n_clients());
    write_training(out, cfg, &data, state)?;
    write_manifest(out, "train", Some(cfg), seeds)
}

fn cmd_consensus(cfg: &ExperimentConfig, out: &mut Outputs, strict: bool) -> CliResult<()> {
    let data = load_data(cfg)?;
    let grid = make_weight_grid(cfg.federation.n_atoms, cfg.consensus.resolution)?;
    let mut trace: Vec<ConsensusEntry> = Vec::new();
    let state = train_federation(cfg, &data, strict, |s| {
        trace.push(pairwise_discrepancy(s, &grid, &cfg.federation.barycenter)?);
        Ok(())
    })?;
    let seeds = federation_seeds(cfg, state.n_clients());
    out.write("consensus_trace.csv", |w| io::write_consensus_trace(w, &trace))?;
    write_training(out, cfg, &data, state)?;
    write_manifest(out, "consensus", Some(cfg), seeds)
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let data = load_data(cfg)?;
    let domains = data.domains("ablate")?;
    let pipeline = PipelineConfig { federation: cfg.federation, classifier: cfg.classifier, n_virtual: cfg.n_virtual };
    let report = run_ablation_on(&domains, &cfg.ablation, &pipeline)?;
    out.write("ablation.csv", |w| io::write_ablation_report(w, &report))?;
    out.json("ablation_report.json", &report)?;
    let seeds = serde_json::json!({
        "master": cfg.seed,
        "removal": "derive(master, [5, fraction index, trial])",
        "trial_federation": "master for trial 0, derive(master, [4, trial]) otherwise",
    });
    write_manifest(out, "ablate", Some(cfg), seeds)
}

/// Nested class sets for a removal ladder; zero-removal entries are dropped
/// because the study always starts with the full target.
pub fn removal_ladder(fractions: &[f64], n_class: usize, rng_seed: u64) -> Vec<Vec<usize>> {
    let counts: Vec<usize> = fractions.iter().map(|&f| classes_to_remove(f, n_class)).collect();
    let order = pick_classes(n_class, counts.iter().copied().max().unwrap_or(0), rng_seed);
    counts.into_iter().filter(|&c| c > 0).map(|c| order[..c].to_vec()).collect()
}

fn cmd_envelope(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let data = load_data(cfg)?;
    let target = data.labeled_target("envelope")?;
    let test = data.test("envelope")?;
    let sets = match &cfg.envelope.removed_class_sets {
        Some(sets) => sets.clone(),
        None => removal_ladder(&cfg.envelope.removal_fractions, target.n_class, seed::derive(cfg.seed, &[seed::STREAM_REMOVAL])),
    };
    let sources = train_sources_only(&data.sources, &cfg.federation)?;
    let report = envelope_study(&sources, target, test, &sets, &cfg.envelope.study)?;
    out.json("envelope_report.json", &report)?;
    let seeds = serde_json::json!({
        "master": cfg.seed,
        "removal_order": seed::derive(cfg.seed, &[seed::STREAM_REMOVAL]),
        "envelope": cfg.envelope.study.seed,
    });
    write_manifest(out, "envelope", Some(cfg), seeds)
}

fn cmd_sample(cfg: Option<&ExperimentConfig>, dictionary: &Path, n: usize, rng_seed: u64, out: &mut Outputs, strict: bool) -> CliResult<()> {
    let text = std::fs::read_to_string(dictionary).map_err(|e| CliError::Data(format!("{}: {e}", dictionary.display())))?;
    let dict: Dictionary = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", dictionary.display())))?;
    dict.validate().map_err(|e| CliError::Data(format!("{}: {e}", dictionary.display())))?;
    let bary_cfg = cfg.map(|c| c.federation.barycenter).unwrap_or_default();
    let b = gmm_barycenter(&dict.atoms, &dict.alpha, &bary_cfg)?;
    if !b.converged {
        warn_or_fail(strict, "barycenter did not converge".into())?;
    }
    if n == 0 {
        out.write("samples.csv", |w| io::write_empty_dataset_csv(w, b.gmm.dim()))?;
    } else {
        let samples = b.gmm.sample(n, rng_seed)?;
        out.write("samples.csv", |w| io::write_dataset_csv(w, &samples))?;
    }
    let seeds = serde_json::json!({ "sample": rng_seed, "dictionary": dictionary.display().to_string(), "n": n });
    write_manifest(out, "sample", cfg, seeds)
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    let master = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(master);
    cfg.validate()?;
    Ok(cfg)
}

/// Execute one parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Sample { dictionary, n } = &cli.command {
        let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
        let strict = cli.strict || cfg.as_ref().is_some_and(|c| c.strict);
        let dir = cli.out.clone().or_else(|| cfg.as_ref().and_then(|c| c.out.clone())).unwrap_or_else(|| PathBuf::from("."));
        let rng_seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
        return cmd_sample(cfg.as_ref(), dictionary, *n, rng_seed, &mut Outputs::new(dir)?, strict);
    }
    let cfg = load_config(cli)?;
    let strict = cli.strict || cfg.strict;
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut out = Outputs::new(dir)?;
    match cli.command {
        Command::Train => cmd_train(&cfg, &mut out, strict),
        Command::Consensus => cmd_consensus(&cfg, &mut out, strict),
        Command::Ablate => cmd_ablate(&cfg, &mut out),
        Command::Envelope => cmd_envelope(&cfg, &mut out),
        Command::Sample { .. } => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 4);
        let numerical: CliError = gmmdict_core::Error::Numerical("x".into()).into();
        assert_eq!(numerical.exit_code(), 4);
        let data: CliError = gmmdict_core::Error::invalid("x").into();
        assert_eq!(data.exit_code(), 3);
    }

    #[test]
    fn ladder_is_nested_and_skips_zero() {
        let sets = removal_ladder(&[0.0, 0.2, 0.4], 5, 3);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].len(), 1);
        assert_eq!(sets[1].len(), 2);
        assert_eq!(sets[0][0], sets[1][0]);
        assert!(removal_ladder(&[], 5, 3).is_empty());
    }

    #[test]
    fn config_requires_exactly_one_source() {
        let both = r#"{"data": {"synthetic": {}, "csv": {"sources": [], "target_train": "t.csv"}}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(both).is_err());
        let none = r#"{"seed": 1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(none).is_err());
        let one: ExperimentConfig = serde_json::from_str(r#"{"data": {"synthetic": {"n_class": 3}}}"#).unwrap();
        assert!(matches!(one.data, DataSource::Synthetic(ref s) if s.n_class == 3));
        let typo = r#"{"data": {"synthetic": {}}, "federation": {"n_atom": 2}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(typo).is_err());
        let bad_strategy = r#"{"data": {"synthetic": {}}, "federation": {"strategy": "gossip"}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad_strategy).is_err());
    }

    #[test]
    fn master_seed_reaches_every_section() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"data": {"synthetic": {}}}"#).unwrap();
        let cfg = cfg.with_seed(42);
        assert_eq!(cfg.federation.seed, 42);
        assert_eq!(cfg.ablation.seed, 42);
        assert_eq!(cfg.envelope.study.seed, 42);
        assert!(matches!(cfg.data, DataSource::Synthetic(ref s) if s.seed == 42));
    }
}
