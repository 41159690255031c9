//! Binary checkpoint container:
//!
//! ```text
//! b"SEFGANCK" | u32 format_version | u64 header_len | header (JSON) | u64 payload_len | safetensors payload
//! ```
//! All integers little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::config::{Stage, TrainConfig};
use crate::train::optim::AdamScalars;
use crate::train::TrainState;
use crate::data::SegmentSpec;

pub const MAGIC: &[u8; 8] = b"SEFGANCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentSpec,
    pub state: TrainState,
    pub opt_g: Option<AdamScalars>,
    pub opt_d: Option<AdamScalars>,
    pub has_discriminator: bool,
    pub has_best: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let payload = safetensors::serialize(names.into_iter().map(|n| (n.clone(), &self.tensors[n])), None)
            .map_err(|e| Error::Checkpoint(format!("serialise payload: {e}")))?;
        let mut out = Vec::with_capacity(header.len() + payload.len() + 28);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let header_bytes = take_block(&mut r)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Checkpoint("header version disagrees with container".into()));
        }
        let expected = header.model.architecture_hash();
        if header.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match the stored architecture ({expected})",
                header.config_hash
            )));
        }
        let payload = take_block(&mut r)?;
        let tensors = candle_core::safetensors::load_buffer(payload, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("payload: {e}")))?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rejects the checkpoint unless it was written for `cfg`'s generator architecture.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let want = cfg.architecture_hash();
        if self.header.config_hash != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match the loading configuration ({want})",
                self.header.config_hash
            )));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Indexed tensors `{prefix}{i}` for `i in 0..n`.
    pub fn indexed(&self, prefix: &str, n: usize) -> Result<Vec<Tensor>> {
        (0..n)
            .map(|i| {
                self.tensors
                    .get(&format!("{prefix}{i:06}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}{i:06}")))
            })
            .collect()
    }
}

fn take_block<'a>(r: &mut &'a [u8]) -> Result<&'a [u8]> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    let len = u64::from_le_bytes(b8) as usize;
    if r.len() < len {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (block, rest) = r.split_at(len);
    *r = rest;
    Ok(block)
}

pub fn indexed_name(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:06}")
}
