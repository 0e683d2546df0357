use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, Variant};
use crate::selector::{DEFAULT_TAU, MU_PRESETS};
use crate::sensing::{BLOCK_SIZE, DEBLOCK_STRIDE};

/// Training hyper-parameters. Serialised field-for-field as the JSON config
/// accepted by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub block_main: usize,
    pub block_finetune: usize,
    pub batch_size: usize,
    #[serde(rename = "K")]
    pub stages: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub mu_set: Vec<f64>,
    pub tau: f64,
    /// First and second moment decay rates of the optimiser.
    pub optimizer_decay_rates: (f64, f64),
    pub learning_rate: f64,
    /// Measurement noise σ range for noise finetuning, in 8-bit pixel units.
    pub noise_sigma_range: (f64, f64),
    pub seed: u64,
    /// Sampling ratio of the operator this model is trained for.
    pub ratio: f64,
    pub variant: Variant,
    /// Overlap stride for deblocking finetuning and whole-image evaluation.
    pub deblock_stride: usize,
    /// Directory of training images; falls back to `UNFOLDCS_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Train with a single multiplier instead of sampling from `mu_set`.
    pub fixed_mu: Option<f64>,
    /// Optimiser steps per epoch; defaults to one pass over the images.
    pub steps_per_epoch: Option<usize>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_main: 400,
            epochs_finetune: 10,
            block_main: BLOCK_SIZE,
            block_finetune: 3 * BLOCK_SIZE,
            batch_size: 64,
            stages: 25,
            channels: 32,
            mu_set: MU_PRESETS.to_vec(),
            tau: DEFAULT_TAU,
            optimizer_decay_rates: (0.9, 0.999),
            learning_rate: 1e-4,
            noise_sigma_range: (0.0, 10.0),
            seed: 0,
            ratio: 0.3,
            variant: Variant::DpcDun,
            deblock_stride: DEBLOCK_STRIDE,
            data_dir: None,
            fixed_mu: None,
            steps_per_epoch: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_main", self.epochs_main),
            ("epochs_finetune", self.epochs_finetune),
            ("block_main", self.block_main),
            ("block_finetune", self.block_finetune),
            ("batch_size", self.batch_size),
            ("K", self.stages),
            ("C", self.channels),
            ("deblock_stride", self.deblock_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mu_set.is_empty() || self.mu_set.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("mu_set values must be strictly positive".into()));
        }
        if self.mu_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("mu_set must be sorted ascending".into()));
        }
        if let Some(mu) = self.fixed_mu {
            if !(mu >= 0.0) {
                return Err(Error::Config("fixed_mu must be non-negative".into()));
            }
            if self.variant == Variant::DpcDun && !self.mu_set.iter().any(|&m| m == mu) {
                return Err(Error::Config("fixed_mu must be one of mu_set".into()));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.optimizer_decay_rates;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("optimizer decay rates must lie in [0, 1)".into()));
        }
        let (lo, hi) = self.noise_sigma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Config("noise_sigma_range must satisfy 0 <= lo <= hi".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config("ratio must lie in (0, 1]".into()));
        }
        if self.deblock_stride > self.block_main {
            return Err(Error::Config("deblock_stride cannot exceed block_main".into()));
        }
        if self.block_finetune < self.block_main {
            return Err(Error::Config("block_finetune must be at least block_main".into()));
        }
        self.network_config().validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            stages: self.stages,
            channels: self.channels,
            // one bit per training multiplier
            encoding_len: if self.variant == Variant::DpcDun {
                self.mu_set.len()
            } else {
                0
            },
            variant: self.variant,
            tau: self.tau,
        }
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Configured data directory, or `UNFOLDCS_DATA_DIR`.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("UNFOLDCS_DATA_DIR").map(PathBuf::from))
            .ok_or_else(|| {
                Error::Config("no data_dir configured and UNFOLDCS_DATA_DIR is unset".into())
            })
    }
}
