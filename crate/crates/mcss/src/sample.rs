//! Cross-source pair sampling and training-sample assembly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use uniavatar_core::rng::stream;
use uniavatar_core::utsr;
use uniavatar_render::guidance::{bernoulli, GuidanceImage};
use uniavatar_render::model::load_model;
use uniavatar_render::{
    apply_condition_dropout, apply_lips_mask, render_illumination_guidance,
    render_motion_guidance, FaceModel, FaceParams, GuidanceConfig, Image, Mask,
};

use crate::background::{composite_background, BackgroundBank};
use crate::error::{Error, Result};
use crate::pool::{build_identity_pool, ClipRecord, IdentityPool, MODEL_FILE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Target frames per sample.
    pub clip_len: usize,
    /// Draw reference and target from different clips when possible.
    pub cross_source: bool,
    pub guidance: GuidanceConfig,
    /// Render illumination guidance; when false it is left absent.
    pub with_illumination: bool,
    /// Audio rows per target frame, centred on it (odd).
    pub audio_window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            clip_len: 4,
            cross_source: true,
            guidance: GuidanceConfig::default(),
            with_illumination: true,
            audio_window: 3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::Precondition("clip_len must be at least 1".into()));
        }
        if self.audio_window % 2 == 0 {
            return Err(Error::Precondition(format!(
                "audio_window must be odd, got {}",
                self.audio_window
            )));
        }
        self.guidance.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSelection {
    pub reference_clip: usize,
    pub reference_frame: usize,
    pub target_clip: usize,
    pub target_start: usize,
    /// Reference and target came from the same clip because the identity
    /// has only one.
    pub intra_source: bool,
}

/// Picks a reference frame and a target window. In cross-source mode with
/// at least two clips every ordered pair of distinct clips is equally
/// likely.
pub fn sample_cross_source_pair<R: Rng>(
    clips: &[ClipRecord],
    clip_len: usize,
    cross_source: bool,
    rng: &mut R,
) -> Result<PairSelection> {
    let n = clips.len();
    if n == 0 {
        return Err(Error::Precondition("identity has no clips".into()));
    }
    let (reference_clip, target_clip, intra_source) = if cross_source && n >= 2 {
        let r = rng.random_range(0..n);
        let mut t = rng.random_range(0..n - 1);
        if t >= r {
            t += 1;
        }
        (r, t, false)
    } else {
        let c = rng.random_range(0..n);
        (c, c, true)
    };
    let target = &clips[target_clip];
    if target.frame_count < clip_len {
        return Err(Error::Precondition(format!(
            "clip {} has {} frames, need {clip_len}",
            target.clip_id, target.frame_count
        )));
    }
    let target_start = rng.random_range(0..=target.frame_count - clip_len);
    let reference_frame = rng.random_range(0..clips[reference_clip].frame_count);
    Ok(PairSelection {
        reference_clip,
        reference_frame,
        target_clip,
        target_start,
        intra_source,
    })
}

/// One assembled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sample_id: u64,
    pub identity_id: String,
    pub reference_clip: String,
    pub target_clip: String,
    pub selection: PairSelection,
    pub background_id: usize,
    pub reference_image: Image,
    pub reference_mask: Mask,
    pub reference_dropped: bool,
    pub target_frames: Vec<Image>,
    pub target_masks: Vec<Mask>,
    pub target_params: Vec<FaceParams>,
    pub motion_guidance: Vec<GuidanceImage>,
    pub motion_dropped: bool,
    pub illumination_guidance: GuidanceImage,
    /// `clip_len × audio_window × d_a`, zero when dropped. Windows are
    /// clamped at the clip ends.
    pub audio: Vec<Vec<Vec<f64>>>,
    pub audio_dropped: bool,
    /// Expression coefficients of one uniformly chosen target frame.
    pub expression: Vec<f64>,
    pub expression_dropped: bool,
    pub lighting_label: String,
}

impl TrainingSample {
    /// Pixels outside every face mask of the sample.
    pub fn background_region(&self) -> Result<Mask> {
        let mut m = self.reference_mask.clone();
        for t in &self.target_masks {
            m = m.union(t)?;
        }
        let (h, w) = m.dims();
        Ok(Mask::from_data(h, w, m.data().iter().map(|&b| !b).collect())?)
    }
}

/// Read-only dataset view shared by sampler threads, with a decoded-image
/// cache.
pub struct Dataset {
    pub root: PathBuf,
    pub pool: IdentityPool,
    pub backgrounds: BackgroundBank,
    pub models: BTreeMap<String, FaceModel>,
    images: Mutex<HashMap<String, Arc<Image>>>,
    masks: Mutex<HashMap<String, Arc<Mask>>>,
    audio: Mutex<HashMap<String, Arc<Vec<Vec<f64>>>>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let pool = build_identity_pool(root)?;
        let backgrounds = BackgroundBank::open(root)?;
        let mut models = BTreeMap::new();
        for id in pool.identities.keys() {
            models.insert(id.clone(), load_model(&root.join(id).join(MODEL_FILE))?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            pool,
            backgrounds,
            models,
            images: Mutex::default(),
            masks: Mutex::default(),
            audio: Mutex::default(),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.backgrounds.height, self.backgrounds.width)
    }

    pub fn model(&self, identity: &str) -> Result<&FaceModel> {
        self.models
            .get(identity)
            .ok_or_else(|| Error::Dataset(format!("no face model for {identity}")))
    }

    pub fn image(&self, rel: &str) -> Result<Arc<Image>> {
        if let Some(img) = self.images.lock().expect("cache lock").get(rel) {
            return Ok(img.clone());
        }
        let img = Arc::new(Image::load_png(&self.root.join(rel))?);
        self.images
            .lock()
            .expect("cache lock")
            .insert(rel.to_string(), img.clone());
        Ok(img)
    }

    pub fn mask(&self, rel: &str) -> Result<Arc<Mask>> {
        if let Some(m) = self.masks.lock().expect("cache lock").get(rel) {
            return Ok(m.clone());
        }
        let m = Arc::new(Mask::load_png(&self.root.join(rel))?);
        self.masks
            .lock()
            .expect("cache lock")
            .insert(rel.to_string(), m.clone());
        Ok(m)
    }

    /// Per-frame audio rows of a clip.
    pub fn audio(&self, clip: &ClipRecord) -> Result<Arc<Vec<Vec<f64>>>> {
        let key = clip.audio_path();
        if let Some(a) = self.audio.lock().expect("cache lock").get(&key) {
            return Ok(a.clone());
        }
        let blocks = utsr::read_file(&self.root.join(&key))?;
        let t = blocks
            .first()
            .ok_or_else(|| Error::Dataset(format!("{key} is empty")))?;
        let d = t.shape()[1];
        let rows = Arc::new(t.data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>());
        self.audio
            .lock()
            .expect("cache lock")
            .insert(key, rows.clone());
        Ok(rows)
    }

    fn composited(&self, clip: &ClipRecord, frame: usize, bg: &Image) -> Result<(Image, Mask)> {
        let img = self.image(&clip.frames[frame])?;
        let mask = self.mask(&clip.masks[frame])?;
        Ok((composite_background(&img, &mask.to_alpha(), bg)?, (*mask).clone()))
    }
}

/// Builds sample `sample_id`; the result depends only on the dataset,
/// `config`, `seed` and `sample_id`.
pub fn assemble_training_sample(
    data: &Dataset,
    config: &SamplerConfig,
    seed: u64,
    sample_id: u64,
) -> Result<TrainingSample> {
    config.validate()?;
    let mut rng = stream(seed, "sample", sample_id);
    let ids = data.pool.identity_ids();
    let identity = ids[rng.random_range(0..ids.len())].to_string();
    let clips = data.pool.clips(&identity)?;
    let sel = sample_cross_source_pair(clips, config.clip_len, config.cross_source, &mut rng)?;
    let model = data.model(&identity)?;
    let (h, w) = data.resolution();

    let background_id = rng.random_range(0..data.backgrounds.len());
    let bg = data.image(&data.backgrounds.paths[background_id])?;

    let ref_clip = &clips[sel.reference_clip];
    let (reference_image, reference_mask) = data.composited(ref_clip, sel.reference_frame, &bg)?;

    let tgt = &clips[sel.target_clip];
    let range = sel.target_start..sel.target_start + config.clip_len;
    let mut target_frames = Vec::with_capacity(config.clip_len);
    let mut target_masks = Vec::with_capacity(config.clip_len);
    for f in range.clone() {
        let (img, m) = data.composited(tgt, f, &bg)?;
        target_frames.push(img);
        target_masks.push(m);
    }
    let target_params: Vec<FaceParams> = tgt.params[range.clone()].to_vec();

    let g = &config.guidance;
    let motion_dropped = bernoulli(&mut rng, g.motion_dropout_prob);
    let mut motion_guidance = Vec::with_capacity(config.clip_len);
    for p in &target_params {
        let m = render_motion_guidance(model, p, g, h, w)?;
        let mut m = apply_lips_mask(m, &mut rng, g.lips_mask_prob)?;
        if motion_dropped {
            m = apply_condition_dropout(m, &mut rng, 1.0);
        }
        motion_guidance.push(m);
    }

    let illumination_guidance = if config.with_illumination {
        let p0 = &target_params[0];
        let ig = render_illumination_guidance(model, &p0.lighting, &p0.camera, g, h, w)?;
        apply_condition_dropout(ig, &mut rng, g.global_dropout_prob)
    } else {
        GuidanceImage::absent(uniavatar_render::GuidanceKind::Illumination, h, w)
    };

    let reference_dropped = bernoulli(&mut rng, g.global_dropout_prob);
    let audio_dropped = bernoulli(&mut rng, g.global_dropout_prob);
    let audio_rows = data.audio(tgt)?;
    let half = (config.audio_window / 2) as i64;
    let last = tgt.frame_count as i64 - 1;
    let audio = range
        .map(|f| {
            (-half..=half)
                .map(|o| {
                    if audio_dropped {
                        vec![0.0; tgt.audio_dim]
                    } else {
                        audio_rows[(f as i64 + o).clamp(0, last) as usize].clone()
                    }
                })
                .collect()
        })
        .collect();
    let pick = rng.random_range(0..config.clip_len);
    let expression_dropped = audio_dropped;
    let expression = if expression_dropped {
        vec![0.0; model.expr_dims]
    } else {
        target_params[pick].expression.clone()
    };

    Ok(TrainingSample {
        sample_id,
        identity_id: identity,
        reference_clip: ref_clip.clip_id.clone(),
        target_clip: tgt.clip_id.clone(),
        selection: sel,
        background_id,
        reference_image,
        reference_mask,
        reference_dropped,
        target_frames,
        target_masks,
        target_params,
        motion_guidance,
        motion_dropped,
        illumination_guidance,
        audio,
        audio_dropped,
        expression,
        expression_dropped,
        lighting_label: tgt.lighting_label.clone(),
    })
}
