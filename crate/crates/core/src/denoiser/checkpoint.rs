//! Versioned single-file checkpoint: model configuration, vocabularies and
//! parameter arrays keyed by module path. Writes are atomic
//! (temp-file-then-rename); loading validates the version and every shape.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::encoder::{EncoderAdapter, TokenVocab};
use super::params::assign_checked;
use super::{Denoiser, ModelConfig};
use crate::corpus::LabelVocab;
use crate::error::{Error, Result};
use ndarray::Array2;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamBlob {
    rows: usize,
    cols: usize,
    /// Little-endian f64 bytes, base64.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    adapter: String,
    token_vocab: Vec<String>,
    label_vocab: Vec<String>,
    /// Free-form configuration record (the trainer stores its full config).
    #[serde(default)]
    extra: serde_json::Value,
    params: BTreeMap<String, ParamBlob>,
}

fn encode_array(a: &Array2<f64>) -> ParamBlob {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ParamBlob { rows: a.nrows(), cols: a.ncols(), data: B64.encode(bytes) }
}

fn decode_array(name: &str, blob: &ParamBlob) -> Result<Array2<f64>> {
    let bytes = B64
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("parameter {name:?}: bad base64: {e}")))?;
    let expect = blob.rows * blob.cols * 8;
    if bytes.len() != expect {
        return Err(Error::Checkpoint(format!(
            "parameter {name:?}: {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((blob.rows, blob.cols), values)
        .map_err(|e| Error::Checkpoint(format!("parameter {name:?}: {e}")))
}

/// Serialize a model (plus an arbitrary configuration record) to `path`.
pub fn save_checkpoint(
    model: &Denoiser,
    extra: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut params = BTreeMap::new();
    for id in model.params.ids() {
        params.insert(model.params.name(id).to_string(), encode_array(model.params.value(id)));
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: model.cfg.clone(),
        adapter: model.adapter().kind_name().to_string(),
        token_vocab: model.token_vocab.names().to_vec(),
        label_vocab: model.label_vocab.names().to_vec(),
        extra,
        params,
    };
    let json = serde_json::to_vec(&file)
        .map_err(|e| Error::Runtime(format!("serializing checkpoint: {e}")))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    tmp.write_all(&json).map_err(|e| Error::io(path.display().to_string(), e))?;
    tmp.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

/// Load a model and its stored configuration record. An "external" adapter
/// comes back with an empty feature store; attach one before encoding.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Denoiser, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has version {}, this build reads version {CHECKPOINT_VERSION}",
            path.display(),
            file.version
        )));
    }
    let adapter = match file.adapter.as_str() {
        "toy" => EncoderAdapter::Toy,
        "external" => EncoderAdapter::External(Default::default()),
        other => {
            return Err(Error::Checkpoint(format!("unknown adapter kind {other:?}")));
        }
    };
    let token_vocab = TokenVocab::from_names(file.token_vocab);
    let mut label_vocab = LabelVocab::new();
    for name in &file.label_vocab {
        label_vocab.intern(name);
    }
    let mut model = Denoiser::new(file.model, token_vocab, label_vocab, adapter, 0)?;
    let expected: Vec<String> =
        model.params.ids().map(|id| model.params.name(id).to_string()).collect();
    for name in &expected {
        let blob = file.params.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {name:?}"))
        })?;
        let value = decode_array(name, blob)?;
        assign_checked(&mut model.params, name, value)?;
    }
    if file.params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            file.params.len(),
            expected.len()
        )));
    }
    Ok((model, file.extra))
}
