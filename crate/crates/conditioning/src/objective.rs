//! The training objective of one assembled sample.

use rand::Rng;
use rand_distr::StandardNormal;
use uniavatar_core::rng::stream;
use uniavatar_core::{Tensor, Var};
use uniavatar_mcss::TrainingSample;

use crate::config::{NetConfig, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::latent::{decode_latent, encode_latent, image_tensor};
use crate::layers::Fwd;
use crate::loss::{loss_latent, loss_spatial, loss_total, Perceptual};
use crate::nets::{
    denoise_predict, illumination_encode, motion_encode, reference_encode, Conditions, FrameInput,
};
use crate::schedule::DiffusionSchedule;

/// Timestep and per-frame noise of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub t: usize,
    pub eps: Vec<Tensor>,
}

impl SampleNoise {
    /// Draws from the `noise` sub-stream of `seed` keyed by `sample_id`.
    pub fn draw(seed: u64, sample_id: u64, frames: usize, latent: usize, steps: usize) -> Self {
        let mut rng = stream(seed, "noise", sample_id);
        let t = rng.random_range(1..=steps);
        let n = LATENT_CHANNELS * latent * latent;
        let eps = (0..frames)
            .map(|_| {
                let d = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::from_vec(&[LATENT_CHANNELS, latent, latent], d)
            })
            .collect();
        Self { t, eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub lambda: f64,
    /// Feed illumination guidance (when the sample did not drop it).
    pub with_illumination: bool,
    /// Leading target frames used as clean context without loss.
    pub context_frames: usize,
    pub temporal: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub latent: Var,
    pub spatial: Var,
}

/// Per-frame conditions of a sample, ready for [`denoise_predict`].
pub fn sample_conditions(
    f: &mut Fwd,
    cfg: &NetConfig,
    sample: &TrainingSample,
    with_illumination: bool,
) -> Result<Vec<Conditions>> {
    let reference = if sample.reference_dropped {
        None
    } else {
        let z = f.g.constant(encode_latent(&sample.reference_image)?);
        Some(reference_encode(f, cfg, z)?)
    };
    let illumination = if with_illumination && !sample.illumination_guidance.dropped {
        let x = f.g.constant(image_tensor(&sample.illumination_guidance.image));
        Some(illumination_encode(f, cfg, x)?)
    } else {
        None
    };
    let expression = if sample.expression_dropped {
        None
    } else {
        Some(f.g.constant(Tensor::new(vec![1, sample.expression.len()], sample.expression.clone())?))
    };
    let mut out = Vec::with_capacity(sample.target_frames.len());
    for k in 0..sample.target_frames.len() {
        let motion = if sample.motion_dropped {
            None
        } else {
            let x = f.g.constant(image_tensor(&sample.motion_guidance[k].image));
            Some(motion_encode(f, cfg, x)?)
        };
        let audio = if sample.audio_dropped {
            None
        } else {
            let rows = &sample.audio[k];
            let d = rows.first().map_or(0, Vec::len);
            let data = rows.concat();
            Some(f.g.constant(Tensor::new(vec![rows.len(), d], data)?))
        };
        out.push(Conditions {
            reference: reference.clone(),
            motion,
            illumination,
            audio,
            expression,
        });
    }
    Ok(out)
}

/// Loss of one sample averaged over its non-context frames.
pub fn sample_loss(
    f: &mut Fwd,
    cfg: &NetConfig,
    schedule: &DiffusionSchedule,
    perceptual: &Perceptual,
    sample: &TrainingSample,
    noise: &SampleNoise,
    opts: &ObjectiveOptions,
) -> Result<LossVars> {
    let n = sample.target_frames.len();
    if opts.context_frames >= n {
        return Err(Error::Precondition(format!(
            "{} context frames leave nothing to predict in a {n}-frame sample",
            opts.context_frames
        )));
    }
    if noise.eps.len() != n {
        return Err(Error::Dimension(format!("{} noise tensors for {n} frames", noise.eps.len())));
    }
    let conds = sample_conditions(f, cfg, sample, opts.with_illumination)?;
    let ab = schedule.alpha_bar(noise.t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());

    let mut frames = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for (k, cond) in conds.into_iter().enumerate() {
        let x0 = encode_latent(&sample.target_frames[k])?;
        if k < opts.context_frames {
            frames.push(FrameInput {
                z: f.g.constant(x0),
                t: 0,
                cond,
            });
            continue;
        }
        let zt = crate::schedule::diffusion_forward(x0.data(), noise.t, noise.eps[k].data(), schedule)?;
        let z = f.g.constant(Tensor::from_vec(x0.shape(), zt));
        frames.push(FrameInput { z, t: noise.t, cond });
        targets.push(k);
    }
    let eps_hat = denoise_predict(f, cfg, &frames, opts.temporal)?;

    let mut acc: Option<(Var, Var)> = None;
    for &k in &targets {
        let eps = f.g.constant(noise.eps[k].clone());
        let latent = loss_latent(f.g, eps, eps_hat[k])?;
        // one-step x̂₀ = (z_t − √(1−ᾱ)·ε̂)/√ᾱ
        let noise_part = f.g.scale(eps_hat[k], sn);
        let diff = f.g.sub(frames[k].z, noise_part)?;
        let x0_hat = f.g.scale(diff, 1.0 / sa);
        let img = decode_latent(f.g, x0_hat)?;
        let gt = f.g.constant(image_tensor(&sample.target_frames[k]));
        let spatial = loss_spatial(f.g, img, gt, noise.t, schedule.steps(), perceptual)?;
        acc = Some(match acc {
            Some((l, s)) => (f.g.add(l, latent)?, f.g.add(s, spatial)?),
            None => (latent, spatial),
        });
    }
    let (l, s) = acc.expect("at least one target frame");
    let inv = 1.0 / targets.len() as f64;
    let latent = f.g.scale(l, inv);
    let spatial = f.g.scale(s, inv);
    let total = loss_total(f.g, latent, spatial, opts.lambda)?;
    Ok(LossVars { total, latent, spatial })
}
