//! On-disk clip layout and the per-identity candidate pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniavatar_core::utsr;
use uniavatar_render::model::{parse_params_jsonl, FaceParams};

use crate::error::{Error, IoContext, Result};

pub const CLIP_META: &str = "clip.json";
pub const PARAMS_FILE: &str = "params.jsonl";
pub const AUDIO_FILE: &str = "audio.utsr";
pub const MODEL_FILE: &str = "face.model";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BACKGROUND_DIR: &str = "backgrounds";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:05}.png")
}

/// Contents of `clip.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub identity_id: String,
    pub clip_id: String,
    pub lighting_label: String,
    pub fps: f64,
    pub frame_count: usize,
}

impl ClipMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let m: ClipMeta = serde_json::from_str(text)?;
        if m.identity_id.is_empty() || m.clip_id.is_empty() {
            return Err(Error::Dataset("clip.json has an empty id".into()));
        }
        if !(m.fps > 0.0 && m.fps.is_finite()) {
            return Err(Error::Dataset(format!("fps must be positive, got {}", m.fps)));
        }
        Ok(m)
    }
}

/// A validated clip. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub identity_id: String,
    pub clip_id: String,
    pub lighting_label: String,
    pub fps: f64,
    pub frame_count: usize,
    pub dir: String,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub params: Vec<FaceParams>,
    pub audio_dim: usize,
}

impl ClipRecord {
    pub fn audio_path(&self) -> String {
        format!("{}/{AUDIO_FILE}", self.dir)
    }
}

/// Clips grouped by identity, both levels in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityPool {
    pub identities: BTreeMap<String, Vec<ClipRecord>>,
    /// Clips that were found but rejected, with the reason.
    pub skipped: Vec<String>,
}

impl IdentityPool {
    pub fn identity_ids(&self) -> Vec<&str> {
        self.identities.keys().map(String::as_str).collect()
    }

    pub fn clips(&self, identity: &str) -> Result<&[ClipRecord]> {
        self.identities
            .get(identity)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("unknown identity {identity}")))
    }

    pub fn num_clips(&self) -> usize {
        self.identities.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        if entry.file_type().at(&entry.path())?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn load_clip(root: &Path, dir: &Path, identity: &str) -> Result<ClipRecord> {
    let meta_path = dir.join(CLIP_META);
    let meta = ClipMeta::parse(&fs::read_to_string(&meta_path).at(&meta_path)?)?;
    if meta.identity_id != identity {
        return Err(Error::Dataset(format!(
            "clip claims identity {} but lives under {identity}",
            meta.identity_id
        )));
    }
    let params_path = dir.join(PARAMS_FILE);
    let params = parse_params_jsonl(&fs::read_to_string(&params_path).at(&params_path)?)?;
    if params.len() != meta.frame_count {
        return Err(Error::Dataset(format!(
            "{} params for {} frames",
            params.len(),
            meta.frame_count
        )));
    }
    if meta.frame_count == 0 {
        return Err(Error::Dataset("clip has no frames".into()));
    }
    let mut frames = Vec::with_capacity(meta.frame_count);
    let mut masks = Vec::with_capacity(meta.frame_count);
    for i in 0..meta.frame_count {
        for (name, list) in [(frame_name(i), &mut frames), (mask_name(i), &mut masks)] {
            let p = dir.join(&name);
            if !p.is_file() {
                return Err(Error::Dataset(format!("missing {name}")));
            }
            list.push(rel(root, &p));
        }
    }
    let audio_path = dir.join(AUDIO_FILE);
    let (audio, _) = utsr::decode(&fs::read(&audio_path).at(&audio_path)?)?;
    if audio.rank() != 2 || audio.shape()[0] != meta.frame_count {
        return Err(Error::Dataset(format!(
            "audio shape {:?} does not match {} frames",
            audio.shape(),
            meta.frame_count
        )));
    }
    Ok(ClipRecord {
        identity_id: meta.identity_id,
        clip_id: meta.clip_id,
        lighting_label: meta.lighting_label,
        fps: meta.fps,
        frame_count: meta.frame_count,
        dir: rel(root, dir),
        frames,
        masks,
        params,
        audio_dim: audio.shape()[1],
    })
}

/// Walks `<root>/<identity>/<clip>/clip.json`. Malformed clips are recorded
/// in [`IdentityPool::skipped`]; a repeated clip id or an empty result is an
/// error.
pub fn build_identity_pool(root: &Path) -> Result<IdentityPool> {
    let mut pool = IdentityPool::default();
    let mut seen = BTreeSet::new();
    for id_dir in sorted_subdirs(root)? {
        let identity = id_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if identity == BACKGROUND_DIR {
            continue;
        }
        for clip_dir in sorted_subdirs(&id_dir)? {
            if !clip_dir.join(CLIP_META).is_file() {
                continue;
            }
            match load_clip(root, &clip_dir, &identity) {
                Ok(rec) => {
                    if !seen.insert(rec.clip_id.clone()) {
                        return Err(Error::Dataset(format!("duplicate clip id {}", rec.clip_id)));
                    }
                    pool.identities.entry(identity.clone()).or_default().push(rec);
                }
                Err(e) => pool.skipped.push(format!("{}: {e}", rel(root, &clip_dir))),
            }
        }
    }
    if pool.identities.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable clips under {}",
            root.display()
        )));
    }
    Ok(pool)
}

/// One line of the global `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub identity_id: String,
    pub clip_id: String,
    pub lighting_label: String,
    pub fps: f64,
    pub frame_count: usize,
    pub dir: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}
