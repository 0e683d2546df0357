//! Checkpoints: named `f32` tensors (one namespace per stage) in a
//! safetensors container, with the model description stored as JSON in the
//! container's metadata under the `unfoldcs` key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::network::{Network, NetworkConfig, Variant};
use crate::sensing::{generate_phi, MeasurementMatrix, BLOCK_SIZE, DEBLOCK_STRIDE};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "unfoldcs";

/// Everything needed to rebuild a network and its sampling operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub stages: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub ratio: f64,
    pub mu_set: Vec<f64>,
    pub training_config_hash: String,
    pub variant: Variant,
    pub encoding_len: usize,
    pub tau: f64,
    /// Seed of the Gaussian draw behind Φ.
    pub phi_seed: u64,
    pub block_size: usize,
    /// Stride used for overlapping whole-image evaluation.
    pub eval_stride: usize,
    /// The resolved training configuration, when the model was trained here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            stages: self.stages,
            channels: self.channels,
            encoding_len: self.encoding_len,
            variant: self.variant,
            tau: self.tau,
        }
    }

    pub fn for_network(net: &Network, ratio: f64, mu_set: &[f64], phi_seed: u64) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            stages: net.config.stages,
            channels: net.config.channels,
            ratio,
            mu_set: mu_set.to_vec(),
            training_config_hash: String::new(),
            variant: net.config.variant,
            encoding_len: net.config.encoding_len,
            tau: net.config.tau,
            phi_seed,
            block_size: BLOCK_SIZE,
            eval_stride: DEBLOCK_STRIDE,
            train_config: None,
        }
    }

    /// Regenerates the sampling operator this model was trained with.
    pub fn phi(&self) -> Result<MeasurementMatrix> {
        generate_phi(self.ratio, self.block_size * self.block_size, self.phi_seed)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        self.network.visit("", &mut |name, shape, values| {
            let bytes = values
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            tensors.push((name.to_string(), shape.to_vec(), bytes));
        });
        let views = tensors
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::State(format!("tensor {name}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_json = serde_json::to_string(&self.meta).expect("metadata serialises");
        let info = Some(HashMap::from([(META_KEY.to_string(), meta_json)]));
        safetensors::serialize(views, &info).map_err(|e| Error::State(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(origin, "missing model metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| Error::format(origin, e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported format version {}", meta.format_version),
            ));
        }
        let config = meta.network_config();
        config.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format(origin, e.to_string()))?;

        let mut shapes = HashMap::new();
        let template = Network::zeros(config);
        template.visit("", &mut |name, shape, _| {
            shapes.insert(name.to_string(), shape.to_vec());
        });
        let mut network = template;
        let mut failure = None;
        network.visit_mut("", &mut |name, values| {
            if failure.is_some() {
                return;
            }
            let view = match st.tensor(name) {
                Ok(v) => v,
                Err(_) => {
                    failure = Some(format!("missing tensor {name}"));
                    return;
                }
            };
            if view.dtype() != Dtype::F32 || view.shape() != shapes[name].as_slice() {
                failure = Some(format!(
                    "tensor {name} has {:?}{:?}, expected F32{:?}",
                    view.dtype(),
                    view.shape(),
                    shapes[name]
                ));
                return;
            }
            for (dst, chunk) in values.iter_mut().zip(view.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
        });
        if let Some(msg) = failure {
            return Err(Error::format(origin, msg));
        }
        Ok(Checkpoint { meta, network })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::State(format!("checkpoint {} not found", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rounds every parameter through `f32`, matching what a save/load cycle
    /// produces.
    pub fn quantize(network: &mut Network) {
        network.visit_mut("", &mut |_, v| {
            for x in v {
                *x = *x as f32 as f64;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = NetworkConfig {
            stages: 2,
            channels: 8,
            ..NetworkConfig::default()
        };
        let mut network = Network::new(config, &mut rng).unwrap();
        network.stages[1].rho = 0.75;
        Checkpoint::quantize(&mut network);
        let meta = CheckpointMeta::for_network(&network, 0.25, &crate::selector::MU_PRESETS, 3);
        let ckpt = Checkpoint { meta, network };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.network, ckpt.network);
        assert_eq!(back.meta.phi().unwrap().m(), 272);
    }

    #[test]
    fn missing_checkpoint_is_a_state_error() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/model.safetensors")),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn metadata_uses_short_keys() {
        let net = Network::zeros(NetworkConfig {
            stages: 1,
            channels: 4,
            ..NetworkConfig::default()
        });
        let meta = CheckpointMeta::for_network(&net, 0.1, &[0.001], 0);
        let v = serde_json::to_value(&meta).unwrap();
        assert_eq!(v["K"], 1);
        assert_eq!(v["C"], 4);
        assert_eq!(v["format_version"], 1);
    }
}
