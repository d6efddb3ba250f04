//! Checkpoint files: one JSON metadata line followed by UTSR weight blocks
//! in parameter-name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uniavatar_core::{utsr, ParamSet};

use crate::config::{NetConfig, ScheduleConfig, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::nets::{param_layout, NetBundle};

pub const CHECKPOINT_FORMAT: &str = "uniavatar-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Longest accepted metadata line.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the training configuration JSON.
    pub config_hash: String,
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub lambda: f64,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: NetBundle,
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(net: NetBundle, cfg: &TrainConfig, step: usize, seed: u64) -> Result<Self> {
        let params = net
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Ok(Self {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                config_hash: config_hash(cfg)?,
                stage: cfg.stage,
                step,
                seed,
                lambda: cfg.lambda,
                schedule: cfg.schedule,
                net: net.config.clone(),
                params,
            },
            net,
        })
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(&ck.meta)?;
    out.push(b'\n');
    for (_, t) in ck.net.params.iter() {
        utsr::encode_into(t, &mut out)?;
    }
    Ok(out)
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Parses and validates the metadata line, returning it and the offset of
/// the first weight block.
pub fn decode_checkpoint_meta(bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    let limit = bytes.len().min(MAX_HEADER_BYTES);
    let Some(nl) = bytes[..limit].iter().position(|&b| b == b'\n') else {
        return bad("missing metadata line");
    };
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[..nl])?;
    if meta.format != CHECKPOINT_FORMAT {
        return bad(format!("unexpected format `{}`", meta.format));
    }
    if meta.version != CHECKPOINT_VERSION {
        return bad(format!("unsupported version {}", meta.version));
    }
    meta.net.validate()?;
    if !(meta.lambda >= 0.0 && meta.lambda.is_finite()) {
        return bad(format!("lambda {} must be non-negative", meta.lambda));
    }
    crate::schedule::DiffusionSchedule::linear(&meta.schedule)?;
    let layout = param_layout(&meta.net);
    if layout.len() != meta.params.len()
        || layout
            .iter()
            .zip(&meta.params)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return bad("parameter list does not match the network configuration");
    }
    Ok((meta, nl + 1))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, mut pos) = decode_checkpoint_meta(bytes)?;
    let mut params = ParamSet::new();
    for e in &meta.params {
        let (t, used) = utsr::decode(&bytes[pos..])?;
        if t.shape() != e.shape.as_slice() {
            return bad(format!("`{}` stored as {:?}, expected {:?}", e.name, t.shape(), e.shape));
        }
        pos += used;
        params.insert(e.name.clone(), t);
    }
    if pos != bytes.len() {
        return bad(format!("{} trailing bytes", bytes.len() - pos));
    }
    let net = NetBundle {
        config: meta.net.clone(),
        params,
    };
    Ok(Checkpoint { meta, net })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).at(path)?)
}
