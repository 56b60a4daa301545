//! Single-file checkpoint container.
//!
//! Layout: one line of JSON (format tag, version, config snapshot,
//! vocabulary, rng state, tensor table, payload length and sha256), a newline,
//! then every tensor's values as little-endian f64 in table order.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use moltext::encoders::{DualEncoder, ModelConfig, Vocab};
use moltext::flowgen::{Flow, GenConfig};
use moltext::rng;
use moltext::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "moltext-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("tensor {name}: checkpoint has {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Option<Vec<usize>>,
        found: Option<Vec<usize>>,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSnapshot {
    DualEncoder { model: ModelConfig },
    Flow { flow: GenConfig },
}

/// Where the seeded streams stood when the checkpoint was written.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelSnapshot,
    pub vocab: Vec<String>,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u64,
    config: ModelSnapshot,
    vocab: Vec<String>,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    sha256: String,
}

fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

impl Checkpoint {
    pub fn from_dual_encoder(model: &DualEncoder, rng: RngState) -> Self {
        Self {
            version: FORMAT_VERSION,
            config: ModelSnapshot::DualEncoder {
                model: model.config.clone(),
            },
            vocab: model.vocab.tokens().to_vec(),
            rng,
            tensors: store_tensors(&model.store),
        }
    }

    pub fn from_flow(flow: &Flow, rng: RngState) -> Self {
        Self {
            version: FORMAT_VERSION,
            config: ModelSnapshot::Flow {
                flow: flow.config.clone(),
            },
            vocab: Vec::new(),
            rng,
            tensors: store_tensors(&flow.store),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format: FORMAT_TAG.into(),
            version: u64::from(self.version),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            rng: self.rng.clone(),
            tensors: entries,
            payload_bytes: payload.len(),
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(payload);
        out
    }

    /// Parses the container and checks its checksum. Shapes are validated
    /// against the config by [`restore_dual_encoder`] / [`restore_flow`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptFile(m.to_string());
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("no header line"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(&e.to_string()))?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing version"))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != header.payload_bytes {
            return Err(corrupt(&format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(corrupt("checksum mismatch"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(&format!("tensor {} runs past the payload", e.name)))?;
            let t =
                Tensor::new(&e.shape, data.to_vec()).map_err(|err| corrupt(&err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            version: FORMAT_VERSION,
            config: header.config,
            vocab: header.vocab,
            rng: header.rng,
            tensors,
        })
    }
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    write_atomic(path, &ck.to_bytes())
}

/// Reads, checksums and shape-checks a checkpoint against its own config
/// snapshot.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    match &ck.config {
        ModelSnapshot::DualEncoder { model } => {
            restore_dual_encoder(&ck, model)?;
        }
        ModelSnapshot::Flow { flow } => {
            restore_flow(&ck, flow)?;
        }
    }
    Ok(ck)
}

/// Every name in `fresh` must appear in `ck` with the same shape, and `ck`
/// must hold nothing else.
fn fill_store(fresh: &mut ParamStore, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let saved: HashMap<&str, &Tensor> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let names: Vec<(String, Vec<usize>)> = fresh
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in &names {
        match saved.get(name.as_str()) {
            Some(t) if t.shape() == shape.as_slice() => {
                fresh.set(name, (*t).clone()).expect("shape checked");
            }
            other => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: Some(shape.clone()),
                    found: other.map(|t| t.shape().to_vec()),
                })
            }
        }
    }
    if let Some((name, t)) = ck.tensors.iter().find(|(n, _)| fresh.id_of(n).is_none()) {
        return Err(CheckpointError::ShapeMismatch {
            name: name.clone(),
            expected: None,
            found: Some(t.shape().to_vec()),
        });
    }
    Ok(())
}

/// Rebuilds the dual encoder described by `config` and fills it from `ck`.
pub fn restore_dual_encoder(
    ck: &Checkpoint,
    config: &ModelConfig,
) -> Result<DualEncoder, CheckpointError> {
    let vocab = Vocab::from_tokens(ck.vocab.clone()).map_err(CheckpointError::CorruptFile)?;
    let mut model = DualEncoder::new(config.clone(), vocab, &mut rng::from_seed(0))
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
    fill_store(&mut model.store, ck)?;
    Ok(model)
}

pub fn restore_flow(ck: &Checkpoint, config: &GenConfig) -> Result<Flow, CheckpointError> {
    let mut flow = Flow::new(config.clone(), &mut rng::from_seed(0))
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
    fill_store(&mut flow.store, ck)?;
    Flow::from_store(config.clone(), flow.store)
        .map_err(|e| CheckpointError::CorruptFile(e.to_string()))
}
