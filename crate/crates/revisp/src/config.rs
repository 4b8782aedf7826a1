use std::path::Path;

use revisp_core::pseudo_pairs::RandIspConfig;
use revisp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, read_json, Result};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Randomized forward ISP used to render the PP_rand inputs.
    pub rand_isp: RandIspConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        self.train
            .validate()
            .and_then(|_| self.rand_isp.validate())
            .map_err(|e| format_err(path, e.to_string()))
    }

    /// One seed drives both the trainer and the pseudo-pair renderer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.rand_isp.seed = seed;
        self
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
