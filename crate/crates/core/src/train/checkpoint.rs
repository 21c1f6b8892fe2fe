//! Single-file checkpoints: named f64 arrays in a safetensors container with
//! a JSON metadata block and a SHA-256 digest over metadata and arrays.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anomgan_tensor::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::step::{Optimizers, TrainConfig};
use super::EpochMetrics;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamStore, SpectralState};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "anomgan";

/// Everything except the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub history: Vec<EpochMetrics>,
    /// Epoch and validation AUC of the best model so far.
    pub best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizers: Optimizers,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    sha256: String,
    meta: String,
}

#[derive(Serialize)]
struct HashInput<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    seed: u64,
}

/// Identity of a run: model and training configuration plus seed. The
/// epoch budget is excluded so a run can be extended on resume.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig, seed: u64) -> String {
    let train = TrainConfig {
        max_epochs: 0,
        ..train.clone()
    };
    let bytes = serde_json::to_vec(&HashInput {
        model,
        train: &train,
        seed,
    })
    .expect("configs serialize");
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn store_arrays(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for id in store.ids() {
        let name = format!("{prefix}/{}", store.name(id));
        out.push((name.clone(), store.get(id).clone()));
        if let Some(s) = store.spectral(id) {
            out.push((format!("{name}#u"), Tensor::from_vec([s.u.len()], s.u.clone())));
            out.push((format!("{name}#v"), Tensor::from_vec([s.v.len()], s.v.clone())));
            out.push((
                format!("{name}#sigma"),
                Tensor::from_vec([2], vec![s.sigma, s.n_power_iterations as f64]),
            ));
        }
    }
}

fn adam_arrays(prefix: &str, store: &ParamStore, adam: &Adam, out: &mut Vec<(String, Tensor)>) {
    for (k, id) in store.ids().enumerate() {
        out.push((format!("{prefix}/m/{}", store.name(id)), adam.m[k].clone()));
        out.push((format!("{prefix}/v/{}", store.name(id)), adam.v[k].clone()));
    }
    out.push((
        format!("{prefix}#hyper"),
        Tensor::from_vec(
            [5],
            vec![adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon, adam.steps as f64],
        ),
    ));
}

fn digest(meta: &str, arrays: &[(String, Tensor)]) -> String {
    let mut sorted: Vec<&(String, Tensor)> = arrays.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    h.update(meta.as_bytes());
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(to_bytes(t));
    }
    hex(&h.finalize())
}

impl Checkpoint {
    pub fn arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        store_arrays("generator", self.model.generator.params(), &mut out);
        store_arrays("discriminator", self.model.discriminator.params(), &mut out);
        adam_arrays("adam_g", self.model.generator.params(), &self.optimizers.generator, &mut out);
        adam_arrays(
            "adam_d",
            self.model.discriminator.params(),
            &self.optimizers.discriminator,
            &mut out,
        );
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let meta = serde_json::to_string(&self.meta)?;
        let envelope = serde_json::to_string(&Envelope {
            sha256: digest(&meta, &arrays),
            meta,
        })?;
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = arrays
            .iter()
            .map(|(n, t)| (n.clone(), to_bytes(t), t.shape().to_vec()))
            .collect();
        let views = raw
            .iter()
            .map(|(n, b, s)| {
                TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = Some(HashMap::from([(META_KEY.to_string(), envelope)]));
        safetensors::serialize(views, &info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Parses and verifies a checkpoint. With `expected_hash`, a checkpoint
    /// from a differently configured run is rejected.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated or malformed checkpoint: {e}")))?;
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated or malformed checkpoint: {e}")))?;
        let envelope = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata block".into()))?;
        let envelope: Envelope = serde_json::from_str(envelope)?;
        let meta: CheckpointMeta = serde_json::from_str(&envelope.meta)?;
        if meta.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
                meta.version
            )));
        }
        let mut arrays = Vec::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("array {name} is not f64")));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::from_vec(view.shape().to_vec(), data)));
        }
        if digest(&envelope.meta, &arrays) != envelope.sha256 {
            return Err(Error::Checkpoint("content hash mismatch; file is corrupted".into()));
        }
        let recomputed = config_hash(&meta.model, &meta.train, meta.seed);
        if recomputed != meta.config_hash {
            return Err(Error::Checkpoint("stored config hash does not match stored config".into()));
        }
        if let Some(expected) = expected_hash {
            if expected != meta.config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, run {expected}",
                    meta.config_hash
                )));
            }
        }
        let lookup: HashMap<String, Tensor> = arrays.into_iter().collect();
        let mut model = Model::build(&meta.model, 0)?;
        restore_store("generator", model.generator.params_mut(), &lookup)?;
        restore_store("discriminator", model.discriminator.params_mut(), &lookup)?;
        let optimizers = Optimizers {
            generator: restore_adam("adam_g", model.generator.params(), &lookup)?,
            discriminator: restore_adam("adam_d", model.discriminator.params(), &lookup)?,
        };
        Ok(Self {
            meta,
            model,
            optimizers,
        })
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_hash).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn take<'a>(lookup: &'a HashMap<String, Tensor>, name: &str, shape: Option<&[usize]>) -> Result<&'a Tensor> {
    let t = lookup
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
    if let Some(s) = shape {
        if t.shape() != s {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, model expects {s:?}",
                t.shape()
            )));
        }
    }
    Ok(t)
}

fn restore_store(prefix: &str, store: &mut ParamStore, lookup: &HashMap<String, Tensor>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}/{}", store.name(id));
        let value = take(lookup, &name, Some(store.get(id).shape()))?.clone();
        *store.get_mut(id) = value;
        if let Some(s) = store.spectral(id) {
            let (rows, cols) = (s.u.len(), s.v.len());
            let u = take(lookup, &format!("{name}#u"), Some(&[rows]))?;
            let v = take(lookup, &format!("{name}#v"), Some(&[cols]))?;
            let sig = take(lookup, &format!("{name}#sigma"), Some(&[2]))?;
            store.set_spectral(
                id,
                SpectralState {
                    u: u.data().to_vec(),
                    v: v.data().to_vec(),
                    sigma: sig.data()[0],
                    n_power_iterations: sig.data()[1] as usize,
                },
            );
        }
    }
    Ok(())
}

fn restore_adam(prefix: &str, store: &ParamStore, lookup: &HashMap<String, Tensor>) -> Result<Adam> {
    let hyper = take(lookup, &format!("{prefix}#hyper"), Some(&[5]))?.data().to_vec();
    let mut adam = Adam::new(store, hyper[0], hyper[1], hyper[2]);
    adam.epsilon = hyper[3];
    adam.steps = hyper[4] as u64;
    for (k, id) in store.ids().enumerate() {
        let shape = store.get(id).shape();
        adam.m[k] = take(lookup, &format!("{prefix}/m/{}", store.name(id)), Some(shape))?.clone();
        adam.v[k] = take(lookup, &format!("{prefix}/v/{}", store.name(id)), Some(shape))?.clone();
    }
    Ok(adam)
}
