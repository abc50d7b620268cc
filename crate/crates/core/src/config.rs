//! One strict JSON document carrying every stage's settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::RerankConfig;
use crate::features::FeatureConfig;
use crate::gmsmatch::GmsConfig;
use crate::learn::TrainConfig;
use crate::mining::MiningConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rerank: bool,
    pub k1: usize,
    pub k2: usize,
    pub eta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let r = RerankConfig::default();
        Self {
            rerank: false,
            k1: r.k1,
            k2: r.k2,
            eta: r.eta,
        }
    }
}

impl EvalConfig {
    pub fn rerank_config(&self) -> RerankConfig {
        RerankConfig {
            k1: self.k1,
            k2: self.k2,
            eta: self.eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub gms: GmsConfig,
    pub mining: MiningConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Worker cap; `None` uses every available core.
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.gms.validate()?;
        self.train.validate()?;
        self.eval.rerank_config().validate()?;
        if !(self.mining.tau_min >= 0.0) {
            return Err(Error::Config(format!("tau_min must be non-negative, got {}", self.mining.tau_min)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_documents() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_json(&d.to_json()).unwrap(), d);
        let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.lr0, 0.005);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"k1": 5, "k2": 10}}"#).is_err());
    }
}
