//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `LITCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the payload of little-endian `f32` tensors laid
//! end to end in index order. Offsets are relative to the payload start.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{param_specs, ModelConfig, ParamStore};
use crate::convert::EmaState;
use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AdamWState, Tensor};

pub const MAGIC: &[u8; 8] = b"LITCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const PARAMS: &str = "params/";
const EMA: &str = "ema/";
const OPT_M: &str = "optim/m/";
const OPT_V: &str = "optim/v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub optimizer_state_present: bool,
    #[serde(default)]
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub ema_present: bool,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Everything a training run persists.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ema: Option<EmaState<T>>,
    pub optimizer: Option<AdamWState<T>>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: ParamStore<T>) -> Self {
        Checkpoint {
            config,
            params,
            ema: None,
            optimizer: None,
            metadata: Default::default(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Writes `ckpt` to `path` via a temporary sibling file and a rename, so an
/// existing checkpoint is never left half-written.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, t) in ckpt.params.iter() {
        blobs.push((format!("{PARAMS}{name}"), t.shape().to_vec(), encode(t.data())));
    }
    if let Some(ema) = &ckpt.ema {
        for (name, t) in ema.shadow.iter() {
            blobs.push((format!("{EMA}{name}"), t.shape().to_vec(), encode(t.data())));
        }
    }
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, bufs) in [(OPT_M, &opt.m), (OPT_V, &opt.v)] {
            for (name, buf) in bufs {
                let shape = ckpt
                    .params
                    .get(name)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_else(|| vec![buf.len()]);
                blobs.push((format!("{prefix}{name}"), shape, encode(buf)));
            }
        }
    }
    let mut offset = 0u64;
    let tensors = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            let e = TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape.clone(),
                offset,
                length: bytes.len() as u64,
                sha256: hex(&Sha256::digest(bytes)),
            };
            offset += bytes.len() as u64;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: ckpt.config.clone(),
        optimizer_state_present: ckpt.optimizer.is_some(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        ema_present: ckpt.ema.is_some(),
        ema_decay: ckpt.ema.as_ref().map(|e| e.decay),
        tensors,
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec_pretty(&header)?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for (_, _, bytes) in &blobs {
            f.write_all(bytes)?;
        }
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], consumed: u64) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(CheckpointError::Truncated {
                    needed: consumed + buf.len() as u64,
                    found: consumed + got as u64,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<checkpoint>", e)),
        }
    }
    Ok(())
}

fn read_header_from(r: &mut impl Read) -> Result<(CheckpointHeader, u64)> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(r, &mut magic, 0)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() }.into());
    }
    let mut len = [0u8; 8];
    read_exact_or_truncated(r, &mut len, 8)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 32) {
        return Err(CheckpointError::Header(format!("implausible header length {len}")).into());
    }
    let mut json = vec![0u8; len as usize];
    read_exact_or_truncated(r, &mut json, 16)?;
    let value: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::UnsupportedVersion(version as u32).into());
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, 16 + len))
}

/// Reads the header only; the payload is not touched.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(read_header_from(&mut r)?.0)
}

fn mismatch(name: &str, detail: impl Into<String>) -> Error {
    CheckpointError::IndexMismatch {
        name: name.into(),
        detail: detail.into(),
    }
    .into()
}

fn check_index(header: &CheckpointHeader, payload_len: u64) -> Result<()> {
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(mismatch(&e.name, format!("unsupported dtype {}", e.dtype)));
        }
        if e.offset != expected {
            return Err(mismatch(&e.name, format!("offset {} where {} was expected", e.offset, expected)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(mismatch(
                &e.name,
                format!("length {} bytes for shape {:?}", e.length, e.shape),
            ));
        }
        expected += e.length;
    }
    if expected > payload_len {
        return Err(CheckpointError::Truncated {
            needed: expected,
            found: payload_len,
        }
        .into());
    }
    if expected < payload_len {
        return Err(mismatch("<payload>", format!("{} trailing bytes", payload_len - expected)));
    }
    Ok(())
}

/// Loads and fully validates a checkpoint: magic, version, index layout,
/// per-tensor checksums and parameter shapes against the stored config.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (header, _) = read_header_from(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    check_index(&header, payload.len() as u64)?;

    let mut params = ParamStore::new();
    let mut ema = ParamStore::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for e in &header.tensors {
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        if hex(&Sha256::digest(bytes)) != e.sha256 {
            return Err(CheckpointError::ChecksumMismatch { name: e.name.clone() }.into());
        }
        let data: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if let Some(n) = e.name.strip_prefix(PARAMS) {
            params.insert(n, Tensor::new(e.shape.clone(), data)?);
        } else if let Some(n) = e.name.strip_prefix(EMA) {
            ema.insert(n, Tensor::new(e.shape.clone(), data)?);
        } else if let Some(n) = e.name.strip_prefix(OPT_M) {
            m.insert(n.to_string(), data);
        } else if let Some(n) = e.name.strip_prefix(OPT_V) {
            v.insert(n.to_string(), data);
        } else {
            return Err(mismatch(&e.name, "unknown tensor namespace"));
        }
    }
    for (_, t) in ema.iter_mut() {
        t.requires_grad = false;
    }

    for spec in param_specs(&header.model_config) {
        match params.get(&spec.path) {
            None => return Err(mismatch(&format!("{PARAMS}{}", spec.path), "missing for stored config")),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(mismatch(
                    &format!("{PARAMS}{}", spec.path),
                    format!("shape {:?}, config expects {:?}", t.shape(), spec.shape),
                ))
            }
            _ => {}
        }
    }
    if params.len() != param_specs(&header.model_config).len() {
        return Err(mismatch("params/", "extra tensors not described by the stored config"));
    }
    if header.ema_present != !ema.is_empty() {
        return Err(mismatch("ema/", "ema_present flag disagrees with stored tensors"));
    }
    for (name, buf) in m.iter().chain(&v) {
        match params.get(name) {
            Some(p) if p.len() == buf.len() => {}
            _ => return Err(mismatch(&format!("optim/{name}"), "moment buffer does not match a parameter")),
        }
    }
    if m.len() != v.len() || m.keys().any(|k| !v.contains_key(k)) {
        return Err(mismatch("optim/", "first and second moments cover different parameters"));
    }
    for (name, t) in ema.iter() {
        if params.get(name).map(|p| p.shape()) != Some(t.shape()) {
            return Err(mismatch(&format!("{EMA}{name}"), "EMA tensor does not match a parameter"));
        }
    }
    // an optimizer that has not stepped yet owns no moment buffers
    let fresh_optimizer = header.optimizer_state_present && header.optimizer_step == Some(0);
    if header.optimizer_state_present != !m.is_empty() && !(fresh_optimizer && m.is_empty()) {
        return Err(mismatch("optim/", "optimizer_state_present flag disagrees with stored tensors"));
    }
    let ema = if header.ema_present {
        Some(EmaState {
            shadow: ema,
            decay: header
                .ema_decay
                .ok_or_else(|| CheckpointError::Header("ema_present without ema_decay".into()))?,
        })
    } else {
        None
    };
    let optimizer = if header.optimizer_state_present {
        Some(AdamWState {
            step: header
                .optimizer_step
                .ok_or_else(|| CheckpointError::Header("optimizer state without optimizer_step".into()))?,
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config: header.model_config,
        params,
        ema,
        optimizer,
        metadata: header.metadata,
    })
}
