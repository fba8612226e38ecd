//! Checkpoint persistence.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, the JSON
//! manifest, then every tensor's values as little-endian f64 in the order
//! the manifest lists them. The manifest records a SHA-256 of the payload,
//! so any flipped byte is caught on load, and saving a loaded checkpoint
//! reproduces the original file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{hex, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::prompts::{init_prompts, DeepPrompt, PromptConfig};
use crate::tensor::Tensor;
use crate::tuning::RunHistory;

pub const MAGIC: &[u8; 8] = b"XPTLAB01";
pub const VERSION: u32 = 1;

/// Where one tensor lives in the payload, in f64 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Parameter accounting for a tuned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioInfo {
    /// Parameters the run actually updated.
    pub tuned_params: usize,
    pub backbone_params: usize,
    /// Prompt parameters alone, when prompts exist.
    pub prompt_params: Option<usize>,
    /// prompt_params / (prompt_params + backbone_params).
    pub prompt_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// "pretrained", "ft", or "pt".
    pub kind: String,
    pub config: ModelConfig,
    pub prompt: Option<PromptConfig>,
    pub seed: u64,
    pub init_scheme: String,
    pub selected_lr: Option<f64>,
    pub mlm_losses: Option<Vec<f64>>,
    pub history: Option<RunHistory>,
    pub ratios: Option<RatioInfo>,
    pub backbone_checksum: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: EncoderParams,
    pub prompts: Option<DeepPrompt>,
}

pub const INIT_SCHEME: &str = "normal_std0.02_chacha8";

impl Checkpoint {
    pub fn pretrained(
        cfg: &ModelConfig,
        params: EncoderParams,
        seed: u64,
        mlm_losses: Vec<f64>,
    ) -> Self {
        Self {
            manifest: Manifest {
                version: VERSION,
                kind: "pretrained".into(),
                config: cfg.clone(),
                prompt: None,
                seed,
                init_scheme: INIT_SCHEME.into(),
                selected_lr: None,
                mlm_losses: Some(mlm_losses),
                history: None,
                ratios: None,
                backbone_checksum: String::new(),
                tensors: Vec::new(),
                payload_sha256: String::new(),
            },
            params,
            prompts: None,
        }
    }

    pub fn tuned(
        cfg: &ModelConfig,
        prompt_cfg: Option<&PromptConfig>,
        params: EncoderParams,
        prompts: Option<DeepPrompt>,
        history: RunHistory,
        ratios: RatioInfo,
    ) -> Self {
        Self {
            manifest: Manifest {
                version: VERSION,
                kind: history.mode.tag().into(),
                config: cfg.clone(),
                prompt: prompt_cfg.cloned(),
                seed: history.seed,
                init_scheme: INIT_SCHEME.into(),
                selected_lr: Some(history.lr),
                mlm_losses: None,
                history: Some(history),
                ratios: Some(ratios),
                backbone_checksum: String::new(),
                tensors: Vec::new(),
                payload_sha256: String::new(),
            },
            params,
            prompts,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut all = self.params.named();
        if let Some(p) = &self.prompts {
            all.extend(p.named());
        }
        all
    }
}

/// Serialize to disk. The tensor table, payload hash, and backbone checksum
/// are recomputed from the in-memory parameters, never trusted from the
/// incoming manifest.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let named = ckpt.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let mut h = Sha256::new();
    h.update(&payload);

    let mut manifest = ckpt.manifest.clone();
    manifest.version = VERSION;
    manifest.tensors = entries;
    manifest.payload_sha256 = hex(&h.finalize());
    manifest.backbone_checksum = ckpt.params.backbone_checksum();

    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

fn split_file<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + mlen > bytes.len() {
        return Err(Error::Format(format!(
            "{} is truncated inside the manifest",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| Error::Format(format!("{} manifest: {e}", path.display())))?;
    if manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{} has checkpoint version {}, expected {VERSION}",
            path.display(),
            manifest.version
        )));
    }
    Ok((manifest, &bytes[16 + mlen..]))
}

/// Read and verify a checkpoint: magic, version, payload hash, tensor
/// bounds and shapes, and the recorded backbone checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = split_file(&bytes, path)?;

    let mut h = Sha256::new();
    h.update(payload);
    if hex(&h.finalize()) != manifest.payload_sha256 {
        return Err(Error::Format(format!(
            "{} payload does not match its recorded checksum",
            path.display()
        )));
    }
    let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "{} payload holds {} bytes, manifest expects {}",
            path.display(),
            payload.len(),
            total * 8
        )));
    }

    let mut loaded: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!(
                "tensor {} shape does not match its length",
                e.name
            )));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} overruns the payload", e.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)
            .map_err(|e| Error::Format(format!("tensor decode: {e}")))?;
        if loaded.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }

    manifest.config.validate()?;
    let mut params = EncoderParams::init(&manifest.config, 0);
    for (name, slot) in params.named_mut() {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }

    let prompts = match &manifest.prompt {
        Some(pc) => {
            let mut prompts = init_prompts(&manifest.config, pc)?;
            for (name, slot) in prompts.named_mut() {
                let t = loaded
                    .remove(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, prompts expect {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            Some(prompts)
        }
        None => None,
    };
    if let Some(name) = loaded.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
    }
    if params.backbone_checksum() != manifest.backbone_checksum {
        return Err(Error::Format(format!(
            "{} backbone does not match its recorded checksum",
            path.display()
        )));
    }

    Ok(Checkpoint { manifest, params, prompts })
}

/// Raw little-endian bytes of the backbone tensors only, straight from the
/// file; lets callers compare backbones across checkpoints bytewise.
pub fn read_backbone_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = split_file(&bytes, path)?;
    let mut out = Vec::new();
    for e in &manifest.tensors {
        if e.name == "head_weight" || e.name == "head_bias" || e.name.starts_with("prompt.") {
            continue;
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} overruns the payload", e.name)));
        }
        out.extend_from_slice(&payload[start..end]);
    }
    Ok(out)
}
