//! Synthetic multi-identity, multi-lighting talking-face dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use uniavatar_core::rng::stream;
use uniavatar_core::{utsr, Tensor};
use uniavatar_render::model::{save_model, synthesize_model, MIN_SYNTHETIC_VERTICES};
use uniavatar_render::{render_face, Camera, FaceModel, FaceParams, Lighting, SyntheticModelSpec};

use crate::background::{background_name, procedural_background};
use crate::error::{Error, IoContext, Result};
use crate::pool::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub identities: usize,
    /// Lighting conditions per identity.
    pub lightings: usize,
    /// Clips per identity and lighting.
    pub clips: usize,
    pub frames: usize,
    pub resolution: usize,
    pub fps: f64,
    pub vertices: usize,
    pub shape_dims: usize,
    pub expr_dims: usize,
    pub backgrounds: usize,
    pub audio_dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            identities: 2,
            lightings: 2,
            clips: 2,
            frames: 8,
            resolution: 64,
            fps: 25.0,
            vertices: 144,
            shape_dims: 4,
            expr_dims: 4,
            backgrounds: 32,
            audio_dim: 32,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Precondition(m));
        if self.resolution < 16 {
            return fail(format!("resolution must be at least 16, got {}", self.resolution));
        }
        for (name, v) in [
            ("identities", self.identities),
            ("lightings", self.lightings),
            ("clips", self.clips),
            ("frames", self.frames),
            ("backgrounds", self.backgrounds),
            ("audio_dim", self.audio_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.vertices < MIN_SYNTHETIC_VERTICES {
            return fail(format!(
                "vertices must be at least {MIN_SYNTHETIC_VERTICES}, got {}",
                self.vertices
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.identities * self.lightings * self.clips
    }
}

/// Written to `<root>/dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub lighting: BTreeMap<String, Lighting>,
}

pub const DATASET_INFO: &str = "dataset.json";

pub fn identity_name(i: usize) -> String {
    format!("id_{i:03}")
}

pub fn lighting_label(i: usize) -> String {
    format!("L{i}")
}

/// Ambient level range; lighting `i` of `n` draws from the `i`-th of `n`
/// equal strata so every dataset spans dim to bright.
const AMBIENT_RANGE: (f64, f64) = (0.0, 3.0);

fn random_lighting<R: Rng>(rng: &mut R, i: usize, n: usize) -> Lighting {
    let mut l = Lighting::ZERO;
    let (lo, hi) = AMBIENT_RANGE;
    let base = lo + (hi - lo) * (i as f64 + rng.random_range(0.0..1.0)) / n as f64;
    l.0[0] = std::array::from_fn(|_| base + rng.random_range(-0.3..0.3));
    for k in 1..4 {
        let s = rng.random_range(-0.6..0.6);
        l.0[k] = std::array::from_fn(|_| s + rng.random_range(-0.1..0.1));
    }
    for k in 4..9 {
        let s = rng.random_range(-0.3..0.3);
        l.0[k] = std::array::from_fn(|_| s + rng.random_range(-0.05..0.05));
    }
    l
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth pose and expression trajectories under one lighting.
fn clip_params<R: Rng>(
    model: &FaceModel,
    shape: &[f64],
    lighting: Lighting,
    frames: usize,
    rng: &mut R,
) -> Vec<FaceParams> {
    let wave = |rng: &mut R, amp: f64| {
        (
            rng.random_range(0.3..1.0) * amp,
            rng.random_range(0.25..0.7),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    };
    let pose_w: Vec<_> = (0..3).map(|_| wave(rng, 0.18)).collect();
    let expr_w: Vec<_> = (0..model.expr_dims).map(|_| wave(rng, 1.2)).collect();
    let camera = Camera {
        scale: rng.random_range(0.85..1.0),
        tx: rng.random_range(-0.05..0.05),
        ty: rng.random_range(-0.05..0.05),
    };
    let eval = |(a, w, p): &(f64, f64, f64), t: f64| a * (w * t + p).sin();
    (0..frames)
        .map(|f| {
            let t = f as f64;
            FaceParams {
                pose: std::array::from_fn(|k| eval(&pose_w[k], t)),
                shape: shape.to_vec(),
                expression: expr_w.iter().map(|w| eval(w, t)).collect(),
                camera,
                lighting,
            }
        })
        .collect()
}

/// Per-frame audio features: a fixed linear image of the expression plus
/// a slow random walk.
fn clip_audio<R: Rng>(projection: &[Vec<f64>], params: &[FaceParams], rng: &mut R) -> Tensor {
    let d = projection.len();
    let mut walk: Vec<f64> = (0..d).map(|_| 0.3 * normal(rng)).collect();
    let mut data = Vec::with_capacity(params.len() * d);
    for p in params {
        for (row, w) in projection.iter().zip(walk.iter_mut()) {
            let signal: f64 = row.iter().zip(&p.expression).map(|(a, b)| a * b).sum();
            data.push(signal + 0.1 * *w);
            *w += 0.3 * normal(rng);
        }
    }
    utsr::quantize(&Tensor::from_vec(&[params.len(), d], data))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).at(path)
}

/// Writes the whole dataset under `root`, which must not already hold one.
/// The output is a pure function of `(spec, seed)`.
pub fn generate_synthetic_dataset(spec: &DatasetSpec, seed: u64, root: &Path) -> Result<DatasetInfo> {
    spec.validate()?;
    if root.join(MANIFEST_FILE).exists() {
        return Err(Error::Precondition(format!(
            "{} already contains a dataset",
            root.display()
        )));
    }
    fs::create_dir_all(root).at(root)?;
    let n = spec.resolution;

    let bg_dir = root.join(BACKGROUND_DIR);
    fs::create_dir_all(&bg_dir).at(&bg_dir)?;
    for i in 0..spec.backgrounds {
        let img = procedural_background(n, n, &mut stream(seed, "background", i as u64));
        img.save_png(&bg_dir.join(background_name(i)))?;
    }

    let mut lrng = stream(seed, "lighting", 0);
    let lighting: BTreeMap<String, Lighting> = (0..spec.lightings)
        .map(|i| (lighting_label(i), random_lighting(&mut lrng, i, spec.lightings)))
        .collect();

    let mut prng = stream(seed, "audio-projection", 0);
    let scale = 1.0 / (spec.expr_dims.max(1) as f64).sqrt();
    let projection: Vec<Vec<f64>> = (0..spec.audio_dim)
        .map(|_| (0..spec.expr_dims).map(|_| scale * normal(&mut prng)).collect())
        .collect();

    let mut manifest = String::new();
    let mut clip_index = 0u64;
    for id in 0..spec.identities {
        let identity = identity_name(id);
        let id_dir = root.join(&identity);
        fs::create_dir_all(&id_dir).at(&id_dir)?;
        let mut mrng = stream(seed, "model", id as u64);
        let model = synthesize_model(
            SyntheticModelSpec {
                vertices: spec.vertices,
                shape_dims: spec.shape_dims,
                expr_dims: spec.expr_dims,
            },
            &mut mrng,
        )?;
        save_model(&model, &id_dir.join(MODEL_FILE))?;
        let shape: Vec<f64> = (0..spec.shape_dims).map(|_| mrng.random_range(-1.0..1.0)).collect();

        for li in 0..spec.lightings {
            let label = lighting_label(li);
            for ci in 0..spec.clips {
                let clip_id = format!("{identity}_l{li}_c{ci}");
                let dir = id_dir.join(&clip_id);
                fs::create_dir_all(&dir).at(&dir)?;
                let mut crng = stream(seed, "clip", clip_index);
                clip_index += 1;
                let params = clip_params(&model, &shape, lighting[&label], spec.frames, &mut crng);

                let mut lines = String::new();
                for (f, p) in params.iter().enumerate() {
                    let out = render_face(&model, p, &p.lighting, n, n)?;
                    out.image.save_png(&dir.join(frame_name(f)))?;
                    out.coverage.save_png(&dir.join(mask_name(f)))?;
                    lines.push_str(&p.to_json_line()?);
                    lines.push('\n');
                }
                write(&dir.join(PARAMS_FILE), lines.as_bytes())?;
                let audio = clip_audio(&projection, &params, &mut crng);
                utsr::write_file(&dir.join(AUDIO_FILE), &[&audio])?;

                let meta = ClipMeta {
                    identity_id: identity.clone(),
                    clip_id: clip_id.clone(),
                    lighting_label: label.clone(),
                    fps: spec.fps,
                    frame_count: spec.frames,
                };
                write(&dir.join(CLIP_META), serde_json::to_string_pretty(&meta)?.as_bytes())?;
                let entry = ManifestEntry {
                    identity_id: identity.clone(),
                    clip_id,
                    lighting_label: label.clone(),
                    fps: spec.fps,
                    frame_count: spec.frames,
                    dir: format!("{identity}/{}", meta.clip_id),
                };
                manifest.push_str(&serde_json::to_string(&entry)?);
                manifest.push('\n');
            }
        }
    }
    let info = DatasetInfo {
        spec: spec.clone(),
        seed,
        lighting,
    };
    write(&root.join(DATASET_INFO), serde_json::to_string_pretty(&info)?.as_bytes())?;
    write(&root.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(info)
}
