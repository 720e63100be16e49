//! Consensus between clients' atoms and barycentric-envelope stability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{gmm_barycenter, project_simplex, BarycenterConfig, BarycentricCoords};
use crate::dictionary::{client_loss, Dictionary};
use crate::error::{Error, Result};
use crate::eval::{remove_classes, train_classifier, ClassifierConfig};
use crate::federation::FederationState;
use crate::gmm::{fit_target_gmm, EmConfig, LabeledDataset, LabeledGmm};
use crate::seed;
use crate::transport::{mw2_sq, LabelPenalty};

/// Shared barycentric weights at which every client's barycenter is
/// evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    pub weights: Vec<BarycentricCoords>,
}

impl WeightGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn compositions(k: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == k {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(k, total - first, prefix, out);
        prefix.pop();
    }
}

/// Every simplex point whose coordinates are multiples of `1 / resolution`.
/// Vertices come first in lexicographically decreasing order.
pub fn make_weight_grid(k: usize, resolution: usize) -> Result<WeightGrid> {
    if k == 0 || resolution == 0 {
        return Err(Error::invalid("weight grid needs k >= 1 and resolution >= 1"));
    }
    let mut raw = Vec::new();
    compositions(k, resolution, &mut Vec::with_capacity(k), &mut raw);
    let weights = raw
        .into_iter()
        .map(|c| BarycentricCoords::new(c.into_iter().map(|x| x as f64 / resolution as f64).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightGrid { weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub i: usize,
    pub j: usize,
    /// Worst-case W2 distance between the two clients' barycenters over the grid.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub round: usize,
    pub pairs: Vec<PairGap>,
}

impl ConsensusEntry {
    pub fn max_gap(&self) -> f64 {
        self.pairs.iter().map(|p| p.gap).fold(0.0, f64::max)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairs.iter().find(|p| p.i == a && p.j == b).map(|p| p.gap)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsensusTrace {
    pub entries: Vec<ConsensusEntry>,
}

/// Consensus gaps for dictionaries given directly (client order = index).
pub fn dictionary_discrepancy(dicts: &[&Dictionary], grid: &WeightGrid, config: &BarycenterConfig) -> Result<Vec<PairGap>> {
    if dicts.len() < 2 {
        return Err(Error::invalid("consensus needs at least two clients"));
    }
    let bary: Vec<Vec<LabeledGmm>> = dicts
        .par_iter()
        .map(|d| {
            grid.weights
                .iter()
                .map(|w| Ok(gmm_barycenter(&d.atoms, w, config)?.gmm))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..dicts.len()).flat_map(|i| (i + 1..dicts.len()).map(move |j| (i, j))).collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut gap: f64 = 0.0;
            for (bi, bj) in bary[i].iter().zip(&bary[j]) {
                gap = gap.max(mw2_sq(bi, bj)?.0.max(0.0).sqrt());
            }
            Ok(PairGap { i, j, gap })
        })
        .collect()
}

/// Worst-case W2 gap over the grid for every unordered client pair.
pub fn pairwise_discrepancy(state: &FederationState, grid: &WeightGrid, config: &BarycenterConfig) -> Result<ConsensusEntry> {
    let dicts: Vec<&Dictionary> = state.clients.iter().map(|c| &c.dictionary).collect();
    Ok(ConsensusEntry { round: state.round, pairs: dictionary_discrepancy(&dicts, grid, config)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeConfig {
    /// Client whose atoms are frozen.
    pub atom_client: usize,
    pub iterations: usize,
    pub eta: f64,
    pub comps_per_class: usize,
    pub em: EmConfig,
    pub barycenter: BarycenterConfig,
    pub n_virtual: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            atom_client: 0,
            iterations: 200,
            eta: 0.01,
            comps_per_class: 1,
            em: EmConfig::default(),
            barycenter: BarycenterConfig::default(),
            n_virtual: 2000,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub removed_classes: Vec<usize>,
    pub alpha: Vec<f64>,
    pub mw2_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub rows: Vec<EnvelopeRow>,
}

/// Fit coordinates alone against a target mixture with the atoms frozen:
/// projected gradient descent, then a final simplex projection.
pub fn fit_coordinates(atoms: &[LabeledGmm], target: &LabeledGmm, config: &EnvelopeConfig) -> Result<(BarycentricCoords, f64)> {
    let k = atoms.len();
    let mut dict = Dictionary::new(atoms.to_vec(), BarycentricCoords::uniform(k))?;
    for _ in 0..config.iterations {
        let r = client_loss(&dict, target, false, LabelPenalty::Fixed(0.0), &config.barycenter)?;
        let stepped: Vec<f64> = dict.alpha.iter().zip(&r.grad_alpha).map(|(a, g)| a - config.eta * g).collect();
        dict.alpha = BarycentricCoords::projected(&stepped);
    }
    let alpha = BarycentricCoords::new(project_simplex(&dict.alpha))?;
    dict.alpha = alpha.clone();
    let loss = client_loss(&dict, target, false, LabelPenalty::Fixed(0.0), &config.barycenter)?.value;
    Ok((alpha, loss))
}

/// Freeze one source client's atoms and re-fit target coordinates on the
/// full target and on each reduced target. The first row is always the full
/// target; accuracy comes from virtual samples of the fitted barycenter,
/// scored on `target_test`.
pub fn envelope_study(
    source_state: &FederationState,
    target_full: &LabeledDataset,
    target_test: &LabeledDataset,
    removed_class_sets: &[Vec<usize>],
    config: &EnvelopeConfig,
) -> Result<EnvelopeReport> {
    let client = source_state
        .clients
        .get(config.atom_client)
        .ok_or_else(|| Error::invalid(format!("no client {}", config.atom_client)))?;
    let atoms = &client.dictionary.atoms;
    let n_class = target_full.n_class;
    let mut sets = vec![Vec::new()];
    sets.extend(removed_class_sets.iter().cloned());
    let em = EmConfig { seed: seed::derive(config.seed, &[seed::STREAM_EM]), ..config.em };
    sets.par_iter()
        .map(|removed| {
            let data = if removed.is_empty() { target_full.clone() } else { remove_classes(target_full, removed)? };
            let target = fit_target_gmm(&data.unlabeled(), n_class * config.comps_per_class, &em)?.gmm;
            let (alpha, mw2_loss) = fit_coordinates(atoms, &target, config)?;
            let b = gmm_barycenter(atoms, &alpha, &config.barycenter)?.gmm;
            let virt = b.sample(config.n_virtual, seed::derive(config.seed, &[seed::STREAM_VIRTUAL]))?;
            let accuracy = train_classifier(&virt, &config.classifier)?.accuracy(target_test)?;
            Ok(EnvelopeRow { removed_classes: removed.clone(), alpha: alpha.into_inner(), mw2_loss, accuracy })
        })
        .collect::<Result<Vec<_>>>()
        .map(|rows| EnvelopeReport { rows })
}
