//! DDPM ancestral sampling in the three control modes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use uniavatar_core::rng::stream;
use uniavatar_core::{Graph, Tensor};
use uniavatar_render::{
    render_illumination_guidance, render_motion_guidance, Camera, FaceModel, FaceParams,
    GuidanceConfig, Image, Lighting,
};

use crate::config::{NetConfig, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::latent::{encode_latent, image_tensor, latent_to_image};
use crate::layers::Fwd;
use crate::nets::{
    denoise_predict, illumination_encode, motion_encode, reference_encode, Conditions, FrameInput,
    NetBundle,
};
use crate::schedule::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    /// Audio only.
    Audio,
    /// Audio plus motion guidance.
    Motion,
    /// Audio, motion and illumination guidance.
    Illum,
}

impl std::str::FromStr for InferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "motion" => Ok(Self::Motion),
            "illum" => Ok(Self::Illum),
            other => Err(Error::Usage(format!("unknown mode `{other}` (audio, motion or illum)"))),
        }
    }
}

/// Everything a generation run consumes.
#[derive(Clone, Debug)]
pub struct InferRequest {
    pub reference: Image,
    /// Per-frame audio rows.
    pub audio: Vec<Vec<f64>>,
    pub model: Option<FaceModel>,
    /// Per-frame face parameters driving motion guidance; also the source
    /// of the expression embedding.
    pub params: Option<Vec<FaceParams>>,
    pub lighting: Option<Lighting>,
    /// Frames to generate; defaults to the number of audio rows.
    pub frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    /// Frames denoised jointly.
    pub window: usize,
    /// Previously generated frames carried into the next window.
    pub context: usize,
    pub guidance: GuidanceConfig,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            window: 4,
            context: 2,
            guidance: GuidanceConfig::default(),
        }
    }
}

struct FrameConds {
    motion: Option<Vec<Tensor>>,
    audio: Tensor,
}

fn values(g: &Graph, vs: &[uniavatar_core::Var]) -> Vec<Tensor> {
    vs.iter().map(|&v| g.value(v).clone()).collect()
}

fn check_request(mode: InferMode, req: &InferRequest, cfg: &NetConfig) -> Result<usize> {
    let need = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("mode {mode:?} needs {what}")))
        }
    };
    need(!req.audio.is_empty(), "audio features")?;
    if matches!(mode, InferMode::Motion | InferMode::Illum) {
        need(req.model.is_some(), "a face model")?;
        need(req.params.as_ref().is_some_and(|p| !p.is_empty()), "face parameters")?;
    }
    if mode == InferMode::Illum {
        need(req.lighting.is_some(), "target lighting")?;
    }
    let n = req.frames.unwrap_or(req.audio.len());
    if n == 0 {
        return Err(Error::Usage("nothing to generate: zero frames".into()));
    }
    if let Some(p) = &req.params {
        if matches!(mode, InferMode::Motion | InferMode::Illum) && p.len() < n {
            return Err(Error::Usage(format!("{} parameter rows for {n} frames", p.len())));
        }
    }
    if req.audio.iter().any(|r| r.len() != cfg.audio_dim) {
        return Err(Error::Usage(format!("audio rows must have {} values", cfg.audio_dim)));
    }
    if req.reference.dims() != (cfg.resolution, cfg.resolution) {
        return Err(Error::Usage(format!(
            "reference is {:?}, network expects {}²",
            req.reference.dims(),
            cfg.resolution
        )));
    }
    Ok(n)
}

/// Generates `frames` images. Deterministic for a fixed `seed`.
pub fn infer(
    net: &NetBundle,
    schedule: &DiffusionSchedule,
    mode: InferMode,
    req: &InferRequest,
    opts: &InferOptions,
    seed: u64,
) -> Result<Vec<Image>> {
    let cfg = &net.config;
    let n = check_request(mode, req, cfg)?;
    if opts.window == 0 {
        return Err(Error::Usage("window must be positive".into()));
    }
    let res = cfg.resolution;

    // Condition features are fixed across denoising steps: evaluate once.
    let mut g = Graph::new();
    let mut f = Fwd::new(&mut g, &net.params);
    let rl = f.g.constant(encode_latent(&req.reference)?);
    let reference = reference_encode(&mut f, cfg, rl)?;
    let illumination = if mode == InferMode::Illum {
        let model = req.model.as_ref().expect("checked");
        let camera = req.params.as_ref().map_or(Camera::IDENTITY, |p| p[0].camera);
        let lighting = req.lighting.as_ref().expect("checked");
        let gi = render_illumination_guidance(model, lighting, &camera, &opts.guidance, res, res)?;
        let x = f.g.constant(image_tensor(&gi.image));
        Some(illumination_encode(&mut f, cfg, x)?)
    } else {
        None
    };
    let half = (cfg.audio_window / 2) as i64;
    let last = req.audio.len() as i64 - 1;
    let mut per_frame = Vec::with_capacity(n);
    for k in 0..n {
        let motion = if mode == InferMode::Audio {
            None
        } else {
            let model = req.model.as_ref().expect("checked");
            let p = &req.params.as_ref().expect("checked")[k];
            let gm = render_motion_guidance(model, p, &opts.guidance, res, res)?;
            let x = f.g.constant(image_tensor(&gm.image));
            Some(motion_encode(&mut f, cfg, x)?)
        };
        let rows: Vec<f64> = (-half..=half)
            .flat_map(|o| req.audio[(k as i64 + o).clamp(0, last) as usize].clone())
            .collect();
        per_frame.push((motion, Tensor::new(vec![cfg.audio_window, cfg.audio_dim], rows)?));
    }
    drop(f);
    let reference = values(&g, &reference);
    let illumination = illumination.map(|v| g.value(v).clone());
    let per_frame: Vec<FrameConds> = per_frame
        .into_iter()
        .map(|(m, audio)| FrameConds {
            motion: m.map(|m| values(&g, &m)),
            audio,
        })
        .collect();
    drop(g);

    let mut rng = stream(seed, "infer", 0);
    let expression = match &req.params {
        Some(p) if !p.is_empty() => {
            let pick = rng.random_range(0..p.len().min(n));
            let e = &p[pick].expression;
            if e.len() != cfg.expr_dims {
                return Err(Error::Usage(format!(
                    "expression has {} values, network expects {}",
                    e.len(),
                    cfg.expr_dims
                )));
            }
            Some(Tensor::new(vec![1, e.len()], e.clone())?)
        }
        _ => None,
    };

    let ls = cfg.latent_size();
    let shape = [LATENT_CHANNELS, ls, ls];
    let numel = LATENT_CHANNELS * ls * ls;
    let mut done: Vec<Tensor> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + opts.window).min(n);
        let ctx: Vec<usize> = (start.saturating_sub(opts.context)..start).collect();
        let mut z: Vec<Vec<f64>> = (start..end)
            .map(|_| (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        for t in (1..=schedule.steps()).rev() {
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &net.params);
            let mut frames = Vec::new();
            let cond_of = |f: &mut Fwd, k: usize| -> Conditions {
                let fc = &per_frame[k];
                Conditions {
                    reference: Some(reference.iter().map(|r| f.g.constant(r.clone())).collect()),
                    motion: fc.motion.as_ref().map(|m| m.iter().map(|x| f.g.constant(x.clone())).collect()),
                    illumination: illumination.as_ref().map(|x| f.g.constant(x.clone())),
                    audio: Some(f.g.constant(fc.audio.clone())),
                    expression: expression.as_ref().map(|x| f.g.constant(x.clone())),
                }
            };
            for &k in &ctx {
                let cond = cond_of(&mut f, k);
                frames.push(FrameInput {
                    z: f.g.constant(done[k].clone()),
                    t: 0,
                    cond,
                });
            }
            for (j, k) in (start..end).enumerate() {
                let cond = cond_of(&mut f, k);
                frames.push(FrameInput {
                    z: f.g.constant(Tensor::from_vec(&shape, z[j].clone())),
                    t,
                    cond,
                });
            }
            let eps = denoise_predict(&mut f, cfg, &frames, true)?;
            drop(f);

            let ab = schedule.alpha_bar(t)?;
            let ab_prev = schedule.alpha_bar(t - 1)?;
            let beta = schedule.beta(t)?;
            let alpha = 1.0 - beta;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            for (j, zj) in z.iter_mut().enumerate() {
                let e = g.value(eps[ctx.len() + j]).data();
                for i in 0..numel {
                    let x0 = ((zj[i] - (1.0 - ab).sqrt() * e[i]) / ab.sqrt()).clamp(-1.0, 1.0);
                    let mean = c0 * x0 + ct * zj[i];
                    zj[i] = if t > 1 {
                        mean + sigma * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        mean
                    };
                }
            }
        }
        for zj in z {
            done.push(Tensor::from_vec(&shape, zj));
        }
        start = end;
    }
    done.iter().map(latent_to_image).collect()
}
