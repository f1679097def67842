//! Versioned checkpoint archive.
//!
//! A safetensors file holding the trainable parameters under their
//! namespaces, the Adam moments under `optimizer.m.*` / `optimizer.v.*`, and
//! one JSON metadata entry. Frozen components are referenced by hash only.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use safetensors::tensor::{serialize, TensorView};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Frozen, TxstNet};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{Stage, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "txst";
const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub vgg: String,
    pub clip: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    /// Completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub frozen: FrozenHashes,
    /// Batches are drawn from `(seed, iteration)`, so this is the whole
    /// sampling state.
    pub seed: u64,
    pub adam_step: u64,
    /// Artist names of the style corpus, empty after stage 1.
    pub artists: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Adam,
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    /// Snapshot of `net` trained under `cfg` for `iteration` steps.
    pub fn capture(
        cfg: &TrainConfig,
        frozen: &Frozen,
        net: &TxstNet,
        adam: &Adam,
        iteration: u64,
        artists: Vec<String>,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                stage: cfg.stage,
                iteration,
                config: cfg.clone(),
                config_hash: cfg.hash(),
                frozen: FrozenHashes {
                    vgg: frozen.vgg_hash(),
                    clip: frozen.clip_hash(),
                },
                seed: cfg.seed,
                adam_step: adam.step,
                artists,
            },
            params: net.params().snapshot(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for (name, t) in &self.params {
            buffers.insert(name.clone(), (t.shape().to_vec(), f64_bytes(t.data())));
        }
        for (prefix, state) in [(M_PREFIX, &self.adam.m), (V_PREFIX, &self.adam.v)] {
            for (name, v) in state {
                buffers.insert(format!("{prefix}{name}"), (vec![v.len()], f64_bytes(v)));
            }
        }
        let views = buffers
            .iter()
            .map(|(name, (shape, bytes))| {
                TensorView::new(Dtype::F64, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        Ok(serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let st = SafeTensors::deserialize(bytes)?;
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        let mut params = BTreeMap::new();
        let mut adam = Adam {
            step: meta.adam_step,
            ..Adam::default()
        };
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!(
                    "tensor {name} is {:?}, expected F64",
                    view.dtype()
                )));
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                adam.m.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                adam.v.insert(p.to_string(), data);
            } else {
                params.insert(name, Tensor::new(data, view.shape())?);
            }
        }
        Ok(Checkpoint { meta, params, adam })
    }

    /// Writes to a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp: PathBuf = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters under one namespace, e.g. `decoder`.
    pub fn namespace(&self, ns: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{ns}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Digest of the parameter values, used as the model identifier.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(f64_bytes(t.data()));
        }
        hex::encode(h.finalize())
    }
}
