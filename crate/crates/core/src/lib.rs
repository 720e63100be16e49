//! Decentralized federated dictionary learning over labeled Gaussian mixtures.
//!
//! Every client summarizes its dataset as a labeled diagonal-covariance GMM.
//! Clients jointly learn a dictionary of GMM atoms whose Mixture-Wasserstein
//! barycenters reconstruct each client's mixture. Atoms travel between peers
//! by gossip; barycentric coordinates never leave the client that owns them.
//!
//! Module map:
//!
//! * [`gmm`]: diagonal Gaussians, labeled mixtures, EM fitting, sampling.
//! * [`transport`]: exact discrete OT, Gaussian W2, MW2 and supervised MW2.
//! * [`barycenter`]: Gaussian and labeled GMM barycenters, projections.
//! * [`dictionary`]: the per-client loss, analytic gradients, local steps.
//! * [`federation`]: the round-synchronous gossip engine.
//! * [`analysis`]: consensus gaps and the barycentric envelope study.
//! * [`eval`]: synthetic domains, classifiers, missing-class ablations.
//! * [`io`]: CSV and JSON surfaces.

pub mod analysis;
pub mod barycenter;
pub mod dictionary;
mod error;
pub mod eval;
pub mod federation;
pub mod gmm;
pub mod io;
pub mod seed;
pub mod transport;

pub use analysis::{ConsensusEntry, ConsensusTrace, EnvelopeConfig, EnvelopeReport, EnvelopeRow, WeightGrid};
pub use barycenter::{BarycenterConfig, BarycentricCoords};
pub use dictionary::{Dictionary, LossKind, LossReport};
pub use error::{Error, ErrorKind, Result};
pub use eval::{AblationConfig, AblationReport, Classifier, ClassifierConfig, SyntheticDomains, SyntheticSpec};
pub use federation::{AtomPayload, ClientState, Exchange, FederationConfig, FederationState, FittedDomains, Strategy};
pub use gmm::{DiagGaussian, EmConfig, GmmFit, LabeledDataset, LabeledGmm};
pub use transport::{CostMatrix, LabelPenalty, TransportPlan};
