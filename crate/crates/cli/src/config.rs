use std::path::{Path, PathBuf};

use gmmdict_core::analysis::EnvelopeConfig;
use gmmdict_core::{AblationConfig, ClassifierConfig, FederationConfig, SyntheticSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the experiment's data comes from. Exactly one variant may appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

/// Feature tables with header `f0,...,f{d-1}[,label]`. Relative paths are
/// resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub sources: Vec<PathBuf>,
    pub target_train: PathBuf,
    #[serde(default)]
    pub target_test: Option<PathBuf>,
    /// Inferred from the largest label in the sources when absent.
    #[serde(default)]
    pub n_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusOptions {
    /// Lattice resolution of the shared weight grid.
    pub resolution: usize,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        ConsensusOptions { resolution: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeOptions {
    /// Removal ladder. Sets are nested: each larger fraction removes a
    /// superset of the classes removed by a smaller one.
    pub removal_fractions: Vec<f64>,
    /// Explicit class sets; overrides `removal_fractions` when present.
    pub removed_class_sets: Option<Vec<Vec<usize>>>,
    pub study: EnvelopeConfig,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        EnvelopeOptions { removal_fractions: vec![0.2, 0.4], removed_class_sets: None, study: EnvelopeConfig::default() }
    }
}

/// One JSON document describing a full experiment. The top-level `seed` is
/// the master seed: it replaces every `seed` field of the nested sections,
/// whose random streams are kept apart by stream identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default = "default_n_virtual")]
    pub n_virtual: usize,
    #[serde(default)]
    pub consensus: ConsensusOptions,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub envelope: EnvelopeOptions,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Treat non-convergence as fatal.
    #[serde(default)]
    pub strict: bool,
}

fn default_n_virtual() -> usize {
    2000
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Csv(csv) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new(""));
            for p in csv.sources.iter_mut().chain(std::iter::once(&mut csv.target_train)).chain(csv.target_test.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Push the master seed into every nested section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.federation.seed = seed;
        self.ablation.seed = seed;
        self.envelope.study.seed = seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let f = &self.federation;
        if f.n_atoms == 0 || f.comps_per_class == 0 {
            return bad("federation.n_atoms and federation.comps_per_class must be positive".into());
        }
        if !(f.eta > 0.0 && f.eta.is_finite()) {
            return bad(format!("federation.eta must be positive, got {}", f.eta));
        }
        if !(f.var_floor > 0.0) {
            return bad("federation.var_floor must be positive".into());
        }
        if self.n_virtual == 0 {
            return bad("n_virtual must be positive".into());
        }
        if self.consensus.resolution == 0 {
            return bad("consensus.resolution must be positive".into());
        }
        if self.classifier.epochs == 0 || !(self.classifier.learning_rate > 0.0) {
            return bad("classifier needs positive epochs and learning_rate".into());
        }
        self.ablation.validate().map_err(|e| CliError::Config(format!("ablation: {e}")))?;
        if let Some(f) = self.envelope.removal_fractions.iter().find(|f| !(**f >= 0.0 && **f < 1.0)) {
            return bad(format!("envelope removal fraction {f} outside [0, 1)"));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.n_domains < 2 {
                    return bad("synthetic data needs at least two source domains".into());
                }
                if s.n_class == 0 || s.d == 0 || s.samples_per_domain == 0 {
                    return bad("synthetic counts must be positive".into());
                }
            }
            DataSource::Csv(c) => {
                if c.sources.len() < 2 {
                    return bad("csv data needs at least two source files".into());
                }
                if c.n_class == Some(0) {
                    return bad("n_class must be positive".into());
                }
            }
        }
        Ok(())
    }
}
