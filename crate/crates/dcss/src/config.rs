//! The single JSON run configuration shared by every command.

use std::fs;
use std::path::Path;

use dcss_core::correlation::check_trial_count;
use dcss_core::data::DatasetSpec;
use dcss_core::decode::TrainConfig;
use dcss_core::search::SearchConfig;
use dcss_core::supernet::SupernetSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces the search, training and trial seeds.
pub const SEED_ENV: &str = "DCSS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub n_trials: usize,
    /// Trial `i` uses seed `base_seed + i` unless `seeds` lists them.
    pub base_seed: u64,
    pub seeds: Option<Vec<u64>>,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig { n_trials: 8, base_seed: 0, seeds: None }
    }
}

impl CorrelationConfig {
    pub fn trial_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_trials).map(|i| dcss_core::correlation::trial_seed(self.base_seed, i)).collect(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        check_trial_count(self.n_trials)?;
        if let Some(s) = &self.seeds {
            if s.len() != self.n_trials {
                return Err(CliError::Config(format!(
                    "correlation.seeds lists {} seeds for {} trials",
                    s.len(),
                    self.n_trials
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Used when a command is given no `--out`.
    pub output_dir: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub supernet: SupernetSpec,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub correlation: CorrelationConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Parses `text`, reporting the line and column of the first problem.
    pub fn parse(origin: &str, text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&path.display().to_string(), &text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> CliResult<()> {
        let Some(v) = value else { return Ok(()) };
        let seed: u64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        self.search.seed = seed;
        self.train.seed = seed;
        self.correlation.base_seed = seed;
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.validate()?;
        self.supernet.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        self.correlation.validate()?;
        if self.supernet.num_classes != self.dataset.num_classes {
            return Err(CliError::Config(format!(
                "supernet.num_classes ({}) differs from dataset.num_classes ({})",
                self.supernet.num_classes, self.dataset.num_classes
            )));
        }
        Ok(())
    }
}
