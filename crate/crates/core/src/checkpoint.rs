//! TSLM checkpoint container.
//!
//! Layout: magic `TSLM`, u8 version, u32 header length, JSON header, u32
//! section count, then per section a u16 name length, the name, u8 rank, u32
//! dims and little-endian f32 data, and finally a CRC32 of every preceding
//! byte. Optimizer moments are stored as `adamw.m/<param>` and
//! `adamw.v/<param>` sections. Parameters and moments are kept at f32
//! precision during training, so a decode reproduces them exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tse_tensor::{AdamWState, Tensor};

use crate::binio::{self, Reader};
use crate::error::{io_err, Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{Model, ModelConfig};
use crate::tokenizer::hex_digest;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"TSLM";
const VERSION: u8 = 1;
const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    pub codebook_hash: String,
    /// Hash of the model, frontend and train configs together.
    pub config_hash: String,
    /// Optimizer steps taken.
    pub step: u64,
}

/// Hex SHA-256 over the canonical JSON of the three configs.
pub fn config_hash(model: &ModelConfig, frontend: &FrontendConfig, train: &TrainConfig) -> String {
    let v = serde_json::json!({ "model": model, "frontend": frontend, "train": train });
    hex_digest(v.to_string().as_bytes())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: Option<AdamWState>,
}

pub fn encode_checkpoint(header: &CheckpointHeader, model: &Model, optimizer: Option<&AdamWState>) -> Result<Vec<u8>> {
    if header.model != model.cfg {
        return Err(Error::Config("checkpoint header disagrees with the model config".into()));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    binio::put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let mut sections: Vec<(String, &Tensor)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.value))
        .collect();
    if let Some(state) = optimizer {
        if state.m.len() != model.store.len() || state.v.len() != model.store.len() {
            return Err(Error::Dim("optimizer state does not match the parameter set".into()));
        }
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (name, m) in names.iter().zip(&state.m) {
            sections.push((format!("{M_PREFIX}{name}"), m));
        }
        for (name, v) in names.iter().zip(&state.v) {
            sections.push((format!("{V_PREFIX}{name}"), v));
        }
    }
    binio::put_u32(&mut out, sections.len() as u32);
    for (name, t) in sections {
        binio::put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            binio::put_u32(&mut out, d as u32);
        }
        binio::put_floats(&mut out, t.data(), 4);
    }
    let crc = crc32fast::hash(&out);
    binio::put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let format_err = |reason: String| Error::Format {
        format: "TSLM",
        reason,
    };
    if bytes.len() < 4 {
        return Err(format_err("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(format_err("CRC mismatch".into()));
    }
    let mut r = Reader::new(body, "TSLM");
    r.expect_magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_str(&r.string(len)?)?;
    let mut model = Model::new(header.model.clone())?;
    let count = r.u32()? as usize;
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut m = vec![None; names.len()];
    let mut v = vec![None; names.len()];
    let mut seen = vec![false; names.len()];
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = binio::extent(&r, &dims)?;
        let data = r.floats(n, 4)?;
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let t = Tensor::new(&shape, data)?;
        let slot = |key: &str| {
            names
                .iter()
                .position(|n| n == key)
                .ok_or_else(|| format_err(format!("unknown section {name:?}")))
        };
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m[slot(p)?] = Some(t);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v[slot(p)?] = Some(t);
        } else {
            let i = slot(&name)?;
            if seen[i] {
                return Err(format_err(format!("duplicate section {name:?}")));
            }
            seen[i] = true;
            model.store.load(&name, t)?;
        }
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(format_err(format!("missing parameter {:?}", names[i])));
    }
    let has_m = m.iter().any(Option::is_some);
    let has_v = v.iter().any(Option::is_some);
    let optimizer = if has_m || has_v {
        let m: Option<Vec<Tensor>> = m.into_iter().collect();
        let v: Option<Vec<Tensor>> = v.into_iter().collect();
        match (m, v) {
            (Some(m), Some(v)) => Some(AdamWState {
                step: header.step,
                m,
                v,
            }),
            _ => return Err(format_err("incomplete optimizer state".into())),
        }
    } else {
        None
    };
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, model: &Model, optimizer: Option<&AdamWState>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(header, model, optimizer)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(io_err(path))?)
}
