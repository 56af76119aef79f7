//! Checkpoint file format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "OCRCKPT\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     manifest length M, u64 little-endian
//! 20      M     manifest, UTF-8 JSON (see `Manifest`)
//! 20+M    ...   blob: every parameter as little-endian f32, row-major,
//!               in manifest order; `offset` fields are relative to the blob
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::ModelConfig;
use crate::embedding::PatchConfig;
use crate::error::{Error, Result};
use crate::model::{OcrModel, VocabInfo};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"OCRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub patch: PatchConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn encode<T: Float>(model: &OcrModel<T>) -> Vec<u8> {
    let mut params = Vec::new();
    let mut blob = Vec::with_capacity(model.params().num_scalars() * 4);
    for (name, t) in model.params().iter() {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        patch: *model.patch_config(),
        vocab_size: model.vocab().size,
        vocab_hash: model.vocab().hash.clone(),
        params,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Splits a checkpoint into its manifest and blob.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::CorruptManifest("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(HEADER_LEN..HEADER_LEN.saturating_add(mlen))
        .ok_or_else(|| Error::CorruptManifest(format!("manifest length {mlen} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok((manifest, &bytes[HEADER_LEN + mlen..]))
}

/// Rebuilds a model, checking the checkpoint against `vocab` and, when given,
/// the expected architecture.
pub fn decode<T: Float>(
    bytes: &[u8],
    vocab: &Vocab,
    expected: Option<(&ModelConfig, &PatchConfig)>,
) -> Result<OcrModel<T>> {
    let (manifest, blob) = read_manifest(bytes)?;
    let info = VocabInfo::from(vocab);
    if manifest.vocab_hash != info.hash || manifest.vocab_size != info.size {
        return Err(Error::VocabMismatch {
            expected: manifest.vocab_hash,
            found: info.hash,
        });
    }
    if let Some((cfg, patch)) = expected {
        if *cfg != manifest.model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model config {:?} differs from requested {:?}",
                manifest.model, cfg
            )));
        }
        if *patch != manifest.patch {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint patch config {:?} differs from requested {:?}",
                manifest.patch, patch
            )));
        }
    }
    let mut model = OcrModel::<T>::new(&manifest.model, &manifest.patch, info, 0)?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::CheckpointShape(format!(
            "checkpoint has {} parameters, architecture needs {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    let total: u64 = manifest.params.iter().map(|p| p.bytes).sum();
    if total != blob.len() as u64 {
        return Err(Error::CheckpointShape(format!(
            "blob holds {} bytes, manifest describes {total}",
            blob.len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        let store = model.params_mut();
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointShape(format!(
                "parameter `{}` {:?} does not match architecture slot `{}` {:?}",
                entry.name,
                entry.shape,
                store.name(id),
                store.get(id).shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel * 4)
            .filter(|&e| entry.bytes == (numel * 4) as u64 && e <= blob.len())
            .ok_or_else(|| Error::CheckpointShape(format!("parameter `{}` has a bad byte extent", entry.name)))?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        *store.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(model)
}

pub fn save<T: Float>(model: &OcrModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path, vocab: &Vocab) -> Result<OcrModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, vocab, None)
}

pub fn load_expecting<T: Float>(
    path: &Path,
    vocab: &Vocab,
    cfg: &ModelConfig,
    patch: &PatchConfig,
) -> Result<OcrModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, vocab, Some((cfg, patch)))
}
