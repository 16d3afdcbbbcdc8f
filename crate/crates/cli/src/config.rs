//! Run configuration: one JSON document covering every stage, with flag
//! overrides applied on top and a resolved snapshot written beside the
//! outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use opstress::attacks::{CampaignConfig, PgdConfig};
use opstress::operators::{Arch, ModelConfig};
use opstress::sensitivity::JacobianMethod;
use opstress::synthdata::DatasetConfig;
use opstress::theory::TheoryConfig;
use opstress::training::TrainConfig;
use opstress::{derive_seed, Error, Result};

pub const SNAPSHOT_NAME: &str = "run_config.json";

/// Every stage seed is derived from `seed`, so the per-stage `seed` fields
/// of a loaded file are overwritten by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` leaves the choice to the environment.
    pub workers: Option<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub archs: Vec<Arch>,
    pub campaign: CampaignConfig,
    /// Number of test samples attacked (the first ones).
    pub samples: usize,
    pub random_trials: usize,
    pub random_seed: u64,
    pub pgd: PgdConfig,
    pub confidence: f64,
    pub sensitivity: JacobianMethod,
    /// Perturbation half-width in standardized units.
    pub epsilon: f64,
    pub transfer_tau: f64,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workers: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            archs: Arch::ALL.to_vec(),
            campaign: CampaignConfig::default(),
            samples: 50,
            random_trials: 50,
            random_seed: 0,
            pgd: PgdConfig::default(),
            confidence: 0.95,
            sensitivity: JacobianMethod::Randomized { n_proj: 30, seed: 0 },
            epsilon: 1.0,
            transfer_tau: 0.3,
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills every stage seed from the global seed and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        self.dataset.seed = derive_seed(s, "dataset");
        self.train.seed = derive_seed(s, "train");
        self.campaign.de.seed = derive_seed(s, "attack/de");
        self.random_seed = derive_seed(s, "attack/random");
        self.pgd.seed = derive_seed(s, "attack/pgd");
        if let JacobianMethod::Randomized { seed, .. } = &mut self.sensitivity {
            *seed = derive_seed(s, "sensitivity");
        }
        self.theory.seed = derive_seed(s, "theory");
        self.validate()?;
        Ok(self)
    }

    /// Training seed of one architecture.
    pub fn train_for(&self, arch: Arch) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.train.seed, arch.tag()),
            ..self.train
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.archs.is_empty() {
            return Err(Error::Config("no architectures selected".into()));
        }
        if self.campaign.ks.is_empty() || self.campaign.thresholds.is_empty() {
            return Err(Error::Config("attack budgets and thresholds must be non-empty".into()));
        }
        for &k in &self.campaign.ks {
            self.campaign.de.validate(k)?;
            if k > self.dataset.input_dim() {
                return Err(Error::Config(format!(
                    "k = {k} exceeds the input dimension {}",
                    self.dataset.input_dim()
                )));
            }
        }
        if self.campaign.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config("thresholds must be finite and non-negative".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(SNAPSHOT_NAME), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_is_idempotent_and_derives_stage_seeds() {
        let cfg = RunConfig::default().resolve().unwrap();
        assert_eq!(cfg.clone().resolve().unwrap(), cfg);
        assert_ne!(cfg.dataset.seed, cfg.train.seed);
        assert_ne!(cfg.train_for(Arch::Nomad).seed, cfg.train_for(Arch::Mimonet).seed);
        let other = RunConfig {
            seed: 7,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_ne!(other.campaign.de.seed, cfg.campaign.de.seed);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            samples: 7,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        cfg.snapshot(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(SNAPSHOT_NAME)).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_bad_values_fail() {
        let cfg: RunConfig = serde_json::from_str(r#"{"samples": 3, "campaign": {"ks": [2]}}"#).unwrap();
        assert_eq!(
            (cfg.samples, cfg.campaign.ks.clone(), cfg.random_trials),
            (3, vec![2], 50)
        );
        assert!(RunConfig {
            samples: 0,
            ..RunConfig::default()
        }
        .resolve()
        .is_err());
        let mut big = RunConfig::default();
        big.campaign.ks = vec![100];
        assert!(big.resolve().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"samples": "x"}"#).is_err());
    }
}
