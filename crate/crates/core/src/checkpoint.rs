//! Model checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header describing the architecture and every tensor, then the raw
//! little-endian `f64` payload in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnyModel, ClassifierModel, ClassifierSpec, LeciModel, LeciSpec};
use crate::nn::{Group, ParamStore};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"LECICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Leci { spec: LeciSpec },
    Erm { spec: ClassifierSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelMeta,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (training configuration, environment names).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn meta_of(model: &AnyModel) -> ModelMeta {
    match model {
        AnyModel::Leci(m) => ModelMeta::Leci { spec: m.spec.clone() },
        AnyModel::Classifier(m) => ModelMeta::Erm { spec: m.spec.clone() },
    }
}

/// Serialize a model to bytes.
pub fn to_bytes(model: &AnyModel, extra: serde_json::Value) -> Result<Vec<u8>> {
    let store = model.store();
    let header = Header {
        version: FORMAT_VERSION,
        model: meta_of(model),
        tensors: store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Validation {
        field: "checkpoint",
        msg: msg.into(),
    }
}

/// Parse a checkpoint, returning the model and the header's extra metadata.
pub fn from_bytes(bytes: &[u8]) -> Result<(AnyModel, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut model = match &header.model {
        ModelMeta::Leci { spec } => AnyModel::Leci(LeciModel::new(spec.clone(), &Rng::new(0))?),
        ModelMeta::Erm { spec } => AnyModel::Classifier(ClassifierModel::new(spec.clone(), &Rng::new(0))?),
    };
    let payload = &body[len..];
    let store: &mut ParamStore = model.store_mut();
    if store.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * expected {
        return Err(corrupt(format!(
            "payload holds {} bytes, header needs {}",
            payload.len(),
            8 * expected
        )));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (p, t) in store.iter_mut().zip(&header.tensors) {
        if p.name != t.name || p.value.shape() != t.shape.as_slice() || p.group != t.group {
            return Err(corrupt(format!("tensor {} does not match the architecture", t.name)));
        }
        for v in p.value.data_mut() {
            *v = floats.next().expect("payload length checked");
        }
    }
    Ok((model, header.extra))
}

pub fn save(model: &AnyModel, extra: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, extra)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(AnyModel, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
