//! Motion and illumination condition images and their augmentations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blur::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{Camera, FaceModel, FaceParams, Lighting};
use crate::raster::{coverage_of, render_face, RenderOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Motion,
    Illumination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Lighting of every motion guidance image.
    pub fixed_lighting: Lighting,
    pub blur_radius: usize,
    pub lips_mask_prob: f64,
    pub motion_dropout_prob: f64,
    pub global_dropout_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let mut fixed = Lighting::ZERO;
        fixed.0[0] = [2.5; 3];
        fixed.0[2] = [0.6; 3];
        Self {
            fixed_lighting: fixed,
            blur_radius: 15,
            lips_mask_prob: 0.4,
            motion_dropout_prob: 0.2,
            global_dropout_prob: 0.05,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("lips_mask_prob", self.lips_mask_prob),
            ("motion_dropout_prob", self.motion_dropout_prob),
            ("global_dropout_prob", self.global_dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Precondition(format!("{name} = {p} is outside [0,1]")));
            }
        }
        if self.blur_radius == 0 {
            return Err(Error::Precondition("blur_radius must be at least 1".into()));
        }
        if !self.fixed_lighting.0.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Precondition("fixed_lighting is not finite".into()));
        }
        Ok(())
    }
}

/// Vertex indices of the mouth area.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LipsRegion(pub Vec<u32>);

impl LipsRegion {
    pub fn of(model: &FaceModel) -> Self {
        Self(model.lips.clone())
    }

    /// Triangles with at least one vertex in the region.
    pub fn triangles(&self, model: &FaceModel) -> Result<Vec<[u32; 3]>> {
        let mut member = vec![false; model.num_vertices()];
        for &i in &self.0 {
            *member.get_mut(i as usize).ok_or_else(|| {
                Error::InvalidModel(format!("lips vertex {i} out of range"))
            })? = true;
        }
        Ok(model
            .triangles
            .iter()
            .filter(|t| t.iter().any(|&i| member[i as usize]))
            .copied()
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceImage {
    pub kind: GuidanceKind,
    pub image: Image,
    pub coverage: Mask,
    /// Set when the condition is dropped; the image is then all zeros.
    pub dropped: bool,
    pub blur_radius: Option<usize>,
    /// Pixels covered by lips-adjacent triangles (motion guidance only).
    pub lips_coverage: Option<Mask>,
    pub lips_masked: bool,
}

impl GuidanceImage {
    /// The empty condition used when no guidance is supplied.
    pub fn absent(kind: GuidanceKind, height: usize, width: usize) -> Self {
        Self {
            kind,
            image: Image::new(height, width),
            coverage: Mask::new(height, width),
            dropped: true,
            blur_radius: None,
            lips_coverage: None,
            lips_masked: false,
        }
    }
}

/// Renders the target geometry under the configured fixed lighting; the
/// target's own lighting is ignored.
pub fn render_motion_guidance(
    model: &FaceModel,
    target: &FaceParams,
    config: &GuidanceConfig,
    height: usize,
    width: usize,
) -> Result<GuidanceImage> {
    let out = render_face(model, target, &config.fixed_lighting, height, width)?;
    let lips = LipsRegion::of(model).triangles(model)?;
    let lips_coverage = coverage_of(model, target, &lips, height, width)?;
    Ok(GuidanceImage {
        kind: GuidanceKind::Motion,
        image: out.image,
        coverage: out.coverage,
        dropped: false,
        blur_radius: None,
        lips_coverage: Some(lips_coverage),
        lips_masked: false,
    })
}

/// Neutral geometry (zero pose, shape and expression) under `lighting`
/// seen through `camera`, before blurring.
pub fn render_illumination_unblurred(
    model: &FaceModel,
    lighting: &Lighting,
    camera: &Camera,
    height: usize,
    width: usize,
) -> Result<RenderOutput> {
    let mut neutral = FaceParams::neutral(model, *lighting);
    neutral.camera = *camera;
    render_face(model, &neutral, lighting, height, width)
}

pub fn render_illumination_guidance(
    model: &FaceModel,
    lighting: &Lighting,
    camera: &Camera,
    config: &GuidanceConfig,
    height: usize,
    width: usize,
) -> Result<GuidanceImage> {
    let out = render_illumination_unblurred(model, lighting, camera, height, width)?;
    Ok(GuidanceImage {
        kind: GuidanceKind::Illumination,
        image: gaussian_blur(&out.image, config.blur_radius)?,
        coverage: out.coverage,
        dropped: false,
        blur_radius: Some(config.blur_radius),
        lips_coverage: None,
        lips_masked: false,
    })
}

/// One Bernoulli draw; always consumes exactly one value from `rng`.
pub fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// With probability `p`, zeroes the pixels covered by lips triangles.
pub fn apply_lips_mask<R: Rng>(mut g: GuidanceImage, rng: &mut R, p: f64) -> Result<GuidanceImage> {
    if g.kind != GuidanceKind::Motion {
        return Err(Error::Precondition("lips masking applies to motion guidance only".into()));
    }
    if !bernoulli(rng, p) {
        return Ok(g);
    }
    let lips = g
        .lips_coverage
        .as_ref()
        .ok_or_else(|| Error::Precondition("guidance carries no lips coverage".into()))?;
    for y in 0..g.image.height() {
        for x in 0..g.image.width() {
            if lips.get(y, x) {
                g.image.set(y, x, [0.0; 3]);
            }
        }
    }
    g.lips_masked = true;
    Ok(g)
}

/// With probability `p`, marks the condition dropped and zeroes its image.
pub fn apply_condition_dropout<R: Rng>(mut g: GuidanceImage, rng: &mut R, p: f64) -> GuidanceImage {
    if bernoulli(rng, p) {
        g.dropped = true;
        g.image = Image::new(g.image.height(), g.image.width());
    }
    g
}

/// One line of a guidance manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceRecord {
    pub sample_id: u64,
    pub kind: GuidanceKind,
    pub params_file: String,
    pub image_file: String,
    pub mask_file: String,
    pub dropped: bool,
}

pub fn parse_guidance_manifest(text: &str) -> Result<Vec<GuidanceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}
