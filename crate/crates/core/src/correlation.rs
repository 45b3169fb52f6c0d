//! Paired searching / training performance over repeated trials.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decode::{decode, train_standalone, DecodeMode, DecodedArchitecture, StandaloneNet, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::search::{run_search, SearchConfig};
use crate::stats::{kendall, pearson};
use crate::supernet::{ArchParams, SupernetSpec};

/// One (S-mIoU, T-mIoU) observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub s_miou: f64,
    pub t_miou: f64,
    /// Where the decoded architecture was written, if anywhere.
    #[serde(default)]
    pub arch_path: Option<String>,
    /// Kept out of serialized reports so that they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcludedTrial {
    pub trial_id: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationReport {
    pub n: usize,
    /// `None` when the sample is degenerate; see `rho_note`.
    pub rho: Option<f64>,
    #[serde(default)]
    pub rho_note: Option<String>,
    pub tau: Option<f64>,
    #[serde(default)]
    pub tau_note: Option<String>,
    /// Pairs tied in S-mIoU or T-mIoU.
    pub ties: usize,
    pub records: Vec<TrialRecord>,
    #[serde(default)]
    pub excluded: Vec<ExcludedTrial>,
}

impl CorrelationReport {
    /// Statistics over `records` sorted by trial id.
    pub fn from_records(mut records: Vec<TrialRecord>, mut excluded: Vec<ExcludedTrial>) -> Self {
        records.sort_by_key(|r| r.trial_id);
        excluded.sort_by_key(|e| e.trial_id);
        let xs: Vec<f64> = records.iter().map(|r| r.s_miou).collect();
        let ys: Vec<f64> = records.iter().map(|r| r.t_miou).collect();
        let (rho, rho_note) = match pearson(&xs, &ys) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let (tau, tau_note, ties) = match kendall(&xs, &ys) {
            Ok(k) => (Some(k.tau), None, k.ties),
            Err(e) => (None, Some(e.to_string()), 0),
        };
        CorrelationReport { n: records.len(), rho, rho_note, tau, tau_note, ties, records, excluded }
    }
}

/// Seed of trial `id`: `base_seed + id`.
pub fn trial_seed(base_seed: u64, trial_id: usize) -> u64 {
    base_seed.wrapping_add(trial_id as u64)
}

pub struct TrialOutcome {
    pub record: TrialRecord,
    pub arch: DecodedArchitecture,
    pub supernet: ParamStore,
    pub standalone: ParamStore,
}

/// Search, decode and retrain once with every seed set to `seed`.
pub fn run_trial(
    data: &Dataset,
    spec: &SupernetSpec,
    search: &SearchConfig,
    train: &TrainConfig,
    trial_id: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    let search = SearchConfig { seed, ..search.clone() };
    let train = TrainConfig { seed, ..train.clone() };
    let outcome = run_search(data, spec, &search)?;
    let arch = ArchParams::from_store(&outcome.best.store, spec.layers)?;
    let decoded = decode(&arch, spec, DecodeMode::Fallback, &format!("trial-{trial_id}-seed-{seed}"))?;
    let mut store = ParamStore::new(seed);
    let net = StandaloneNet::new(&decoded, &mut store, train.init, Some(&outcome.best.store))?;
    let trained = train_standalone(&net, &mut store, data, &train)?;
    let record = TrialRecord {
        trial_id,
        seed,
        s_miou: outcome.s_miou(),
        t_miou: trained.t_miou,
        arch_path: None,
        wall_time_s: 0.0,
    };
    for v in [record.s_miou, record.t_miou] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::NonFinite { what: format!("trial {trial_id} mIoU {v}") });
        }
    }
    Ok(TrialOutcome { record, arch: decoded, supernet: outcome.best.store, standalone: trained.best })
}

pub fn check_trial_count(n_trials: usize) -> Result<()> {
    if n_trials < 2 {
        return Err(invalid("correlation", "n_trials must be >= 2"));
    }
    Ok(())
}
