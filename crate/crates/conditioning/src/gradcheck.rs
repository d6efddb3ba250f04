//! Finite-difference verification of the full training loss with every
//! fusion path active.

use rand::Rng;
use rand_distr::StandardNormal;
use uniavatar_core::rng::stream;
use uniavatar_core::{
    finite_diff_check_entries, FiniteDiffOptions, GradCheckReport, Graph, ParamSet, Tensor, Var,
};

use crate::config::{NetConfig, LATENT_CHANNELS};
use crate::error::Result;
use crate::latent::decode_latent;
use crate::layers::Fwd;
use crate::loss::{loss_latent, loss_spatial, loss_total, Perceptual};
use crate::nets::{
    denoise_predict, illumination_encode, motion_encode, reference_encode, Conditions, FrameInput,
    NetBundle,
};
use crate::schedule::DiffusionSchedule;

/// Acceptance threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// Fixed random inputs of the checked loss.
#[derive(Clone, Debug)]
pub struct CheckInputs {
    pub reference: Tensor,
    pub motion: [Tensor; 2],
    pub illumination: Tensor,
    pub audio: [Tensor; 2],
    pub expression: Tensor,
    pub context: Tensor,
    pub z: Tensor,
    pub eps: Tensor,
    pub target: Tensor,
    pub t: usize,
    pub steps: usize,
    pub alpha_bar: f64,
    pub lambda: f64,
}

fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

impl CheckInputs {
    pub fn draw(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "gradcheck-inputs", 0);
        let r = cfg.resolution;
        let l = cfg.latent_size();
        let img = |rng: &mut _| randn(rng, &[3, r, r], 0.5).map(f64::tanh);
        let lat = [LATENT_CHANNELS, l, l];
        let schedule = DiffusionSchedule::linear(&crate::config::ScheduleConfig::desk())?;
        let t = schedule.steps() / 3;
        Ok(Self {
            reference: randn(&mut rng, &lat, 0.5),
            motion: [img(&mut rng), img(&mut rng)],
            illumination: img(&mut rng),
            audio: [
                randn(&mut rng, &[cfg.audio_window, cfg.audio_dim], 1.0),
                randn(&mut rng, &[cfg.audio_window, cfg.audio_dim], 1.0),
            ],
            expression: randn(&mut rng, &[1, cfg.expr_dims], 1.0),
            context: randn(&mut rng, &lat, 0.5),
            z: randn(&mut rng, &lat, 1.0),
            eps: randn(&mut rng, &lat, 1.0),
            target: img(&mut rng),
            t,
            steps: schedule.steps(),
            alpha_bar: schedule.alpha_bar(t)?,
            lambda: 0.1,
        })
    }
}

/// Total loss over one context frame and one noisy frame, with reference,
/// motion gating, illumination, audio, AdaLN and temporal attention all
/// active.
pub fn full_loss(f: &mut Fwd, cfg: &NetConfig, inp: &CheckInputs, perceptual: &Perceptual) -> Result<Var> {
    let r = f.g.constant(inp.reference.clone());
    let reference = reference_encode(f, cfg, r)?;
    let ill = f.g.constant(inp.illumination.clone());
    let illumination = illumination_encode(f, cfg, ill)?;
    let expression = f.g.constant(inp.expression.clone());
    let mut frames = Vec::with_capacity(2);
    for (k, z) in [&inp.context, &inp.z].into_iter().enumerate() {
        let m = f.g.constant(inp.motion[k].clone());
        let motion = motion_encode(f, cfg, m)?;
        let audio = f.g.constant(inp.audio[k].clone());
        let zv = f.g.constant(z.clone());
        frames.push(FrameInput {
            z: zv,
            t: if k == 0 { 0 } else { inp.t },
            cond: Conditions {
                reference: Some(reference.clone()),
                motion: Some(motion),
                illumination: Some(illumination),
                audio: Some(audio),
                expression: Some(expression),
            },
        });
    }
    let eps_hat = denoise_predict(f, cfg, &frames, true)?;
    let eps = f.g.constant(inp.eps.clone());
    let latent = loss_latent(f.g, eps, eps_hat[1])?;
    let noise_part = f.g.scale(eps_hat[1], (1.0 - inp.alpha_bar).sqrt());
    let diff = f.g.sub(frames[1].z, noise_part)?;
    let x0 = f.g.scale(diff, 1.0 / inp.alpha_bar.sqrt());
    let img = decode_latent(f.g, x0)?;
    let gt = f.g.constant(inp.target.clone());
    let spatial = loss_spatial(f.g, img, gt, inp.t, inp.steps, perceptual)?;
    loss_total(f.g, latent, spatial, inp.lambda)
}

/// Replaces every all-zero weight tensor with small random values so no
/// path is switched off.
pub fn activate_zero_init(params: &mut ParamSet, seed: u64) {
    let mut rng = stream(seed, "gradcheck-activate", 0);
    for (name, t) in params.iter_mut() {
        let is_weight = !name.ends_with(".b");
        if is_weight && t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub weights: usize,
    pub checked: usize,
}

/// Central differences against backprop for `cfg`. With `per_tensor`,
/// only that many randomly chosen entries of each tensor are checked;
/// otherwise every entry is.
pub fn check_network_gradients(
    cfg: &NetConfig,
    seed: u64,
    per_tensor: Option<usize>,
    threads: usize,
) -> Result<GradCheckOutcome> {
    let mut net = NetBundle::init(cfg, seed)?;
    activate_zero_init(&mut net.params, seed);
    let inputs = CheckInputs::draw(cfg, seed)?;
    let perceptual = Perceptual::new(cfg.perceptual_channels);
    let mut rng = stream(seed, "gradcheck-entries", 0);
    let mut entries = Vec::new();
    for (name, t) in net.params.iter() {
        match per_tensor {
            Some(k) if k < t.len() => {
                for _ in 0..k {
                    entries.push((name.clone(), rng.random_range(0..t.len())));
                }
            }
            _ => entries.extend((0..t.len()).map(|i| (name.clone(), i))),
        }
    }
    let f = |g: &mut Graph, p: &ParamSet| -> uniavatar_core::Result<Var> {
        let mut fwd = Fwd::new(g, p);
        full_loss(&mut fwd, cfg, &inputs, &perceptual)
            .map_err(|e| uniavatar_core::Error::Usage(e.to_string()))
    };
    let report = finite_diff_check_entries(
        f,
        &net.params,
        &entries,
        FiniteDiffOptions {
            threads: threads.max(1),
            ..Default::default()
        },
    )?;
    Ok(GradCheckOutcome {
        report,
        weights: net.num_weights(),
        checked: entries.len(),
    })
}
