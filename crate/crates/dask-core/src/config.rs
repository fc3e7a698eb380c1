//! Experiment configuration: JSON-loadable, validated, with defaults matching
//! the published training recipe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifelong::VariantSpec;
use crate::rehearser::RehearserConfig;
use crate::reid::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Number of seen (training) domains T.
    pub seen_domains: usize,
    /// Number of unseen (generalization) domains U.
    pub unseen_domains: usize,
    pub ids_per_domain: usize,
    pub views_per_id: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seen_domains: 3,
            unseen_domains: 2,
            ids_per_domain: 20,
            views_per_id: 8,
            image_height: 64,
            image_width: 32,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seen_domains == 0 {
            return Err(Error::Config("need at least one seen domain".into()));
        }
        if self.ids_per_domain < 4 || self.views_per_id < 4 {
            return Err(Error::Config(
                "need at least 4 identities and 4 views per domain".into(),
            ));
        }
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Config("images must be at least 16x16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub rehearser: RehearserConfig,
    /// Retained style-rehearser count (1 keeps only the previous step's).
    pub retained_capacity: usize,
    pub train: TrainConfig,
    pub variant: VariantSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            benchmark: BenchmarkConfig::default(),
            rehearser: RehearserConfig::default(),
            retained_capacity: 1,
            train: TrainConfig::default(),
            variant: VariantSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.rehearser.validate()?;
        self.train.validate()?;
        self.variant.validate()?;
        if self.retained_capacity == 0 {
            return Err(Error::Config("retained_capacity must be >= 1".into()));
        }
        if self.benchmark.image_height < 8 || self.benchmark.image_width < 8 {
            return Err(Error::Config(
                "rehearser needs images of at least 8x8".into(),
            ));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON echo of the resolved configuration.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// FNV-1a over the canonical JSON; identifies a resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        Ok(format!("{h:016x}"))
    }
}
