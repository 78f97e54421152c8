//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then a little-endian `f32` blob holding parameter values,
//! batch-norm buffers and the optimiser moments, in that order. The header
//! carries the SHA-256 of the blob. Writes go through a temporary file and
//! a rename, so a crash never leaves a half-written checkpoint behind.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::trainer::{BestRecord, EpochAccum, EpochRecord, TrainState};
use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Adam;

pub const MAGIC: &[u8; 8] = b"STSGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    epoch: u32,
    batch_in_epoch: usize,
    step: u64,
    accum: EpochAccum,
    history: Vec<EpochRecord>,
    best: Option<BestRecord>,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_weight_decay: f64,
    adam_steps: Vec<u64>,
    blob_len: usize,
    blob_sha256: String,
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let store = state.model.params();
    let mut blob: Vec<f32> = Vec::new();
    let mut params = Vec::new();
    for (_, p) in store.iter() {
        params.push(Entry {
            name: p.name.clone(),
            len: p.value.numel(),
        });
        blob.extend_from_slice(p.value.data());
    }
    let mut buffers = Vec::new();
    for (name, b) in store.buffers() {
        buffers.push(Entry {
            name: name.clone(),
            len: b.len(),
        });
        blob.extend_from_slice(b);
    }
    let opt = &state.optimizer;
    for m in opt.m.iter().chain(opt.v.iter()) {
        blob.extend_from_slice(m);
    }
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        config: state.config.to_toml(),
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        step: state.step,
        accum: state.accum,
        history: state.history.clone(),
        best: state.best,
        params,
        buffers,
        adam_beta1: opt.beta1,
        adam_beta2: opt.beta2,
        adam_eps: opt.eps,
        adam_weight_decay: opt.weight_decay,
        adam_steps: opt.steps.clone(),
        blob_len: bytes.len(),
        blob_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let head = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + head.len() + bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&bytes);
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(state))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let head_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let head_end = 20usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..head_end]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let blob = &bytes[head_end..];
    if blob.len() != header.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, header says {}",
            blob.len(),
            header.blob_len
        )));
    }
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(bad("blob checksum mismatch"));
    }
    let config = RunConfig::parse(&header.config, &[])?;
    let mut model = Model::build(&config.model, config.seed)?;
    let mut floats = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |n: usize| -> Result<Vec<f32>> {
        let v: Vec<f32> = floats.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(bad("blob shorter than its tables"))
        }
    };

    let store = model.params_mut();
    if header.params.len() != store.len() || header.buffers.len() != store.buffers().len() {
        return Err(bad("parameter table does not match the configured model"));
    }
    for e in &header.params {
        let v = take(e.len)?;
        let p = store
            .by_name_mut(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        if p.value.numel() != e.len {
            return Err(Error::Checkpoint(format!("parameter {} has the wrong size", e.name)));
        }
        p.value.data_mut().copy_from_slice(&v);
    }
    for e in &header.buffers {
        let v = take(e.len)?;
        if store.buffers().get(&e.name).map(Vec::len) != Some(e.len) {
            return Err(Error::Checkpoint(format!("buffer {} missing or resized", e.name)));
        }
        *store.buffer_mut(&e.name) = v;
    }
    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
    let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
    if header.adam_steps.len() != sizes.len() {
        return Err(bad("optimiser table does not match the model"));
    }
    let optimizer = Adam {
        beta1: header.adam_beta1,
        beta2: header.adam_beta2,
        eps: header.adam_eps,
        weight_decay: header.adam_weight_decay,
        steps: header.adam_steps,
        m,
        v,
    };
    Ok(TrainState {
        config,
        model,
        optimizer,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
        step: header.step,
        accum: header.accum,
        history: header.history,
        best: header.best,
    })
}
