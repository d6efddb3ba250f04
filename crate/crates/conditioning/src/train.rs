//! Two-stage trainer.

use std::fmt::Write as _;
use std::sync::Arc;

use uniavatar_core::Graph;
use uniavatar_mcss::{Dataset, SampleStream, SamplerConfig};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::Fwd;
use crate::loss::Perceptual;
use crate::nets::{stage2_trainable, NetBundle};
use crate::objective::{sample_loss, ObjectiveOptions, SampleNoise};
use crate::optim::Optimizer;
use crate::schedule::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub latent: f64,
    pub spatial: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,loss_total,loss_latent,loss_spatial";

/// CSV with one row per step.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.total, r.latent, r.spatial);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: NetBundle,
    pub log: Vec<LossRecord>,
}

/// Sampler settings implied by a training configuration.
pub fn sampler_config(cfg: &TrainConfig) -> SamplerConfig {
    let clip_len = if cfg.stage == 1 {
        1
    } else {
        cfg.context_frames + cfg.clip_frames
    };
    SamplerConfig {
        clip_len,
        cross_source: true,
        guidance: cfg.guidance.clone(),
        with_illumination: true,
        audio_window: cfg.net.audio_window,
    }
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let (h, w) = data.resolution();
    if h != cfg.net.resolution || w != cfg.net.resolution {
        return Err(Error::Config(format!(
            "dataset is {h}×{w}, network expects {}²",
            cfg.net.resolution
        )));
    }
    for clips in data.pool.identities.values() {
        for c in clips {
            if c.audio_dim != cfg.net.audio_dim {
                return Err(Error::Config(format!(
                    "clip {} has {}-d audio, network expects {}",
                    c.clip_id, c.audio_dim, cfg.net.audio_dim
                )));
            }
        }
    }
    for (id, m) in &data.models {
        if m.expr_dims != cfg.net.expr_dims {
            return Err(Error::Config(format!(
                "identity {id} has {} expression dims, network expects {}",
                m.expr_dims, cfg.net.expr_dims
            )));
        }
    }
    Ok(())
}

/// Runs `cfg.steps` steps of stage `cfg.stage`. Stage 2 starts from `init`;
/// stage 1 starts from `init` when given, otherwise from fresh weights.
/// `on_step` sees every loss record as it is produced.
pub fn train(
    data: Arc<Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    init: Option<NetBundle>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&data, cfg)?;
    let mut net = match init {
        Some(n) => {
            if n.config != cfg.net {
                return Err(Error::Config("initial weights were built for a different network".into()));
            }
            n
        }
        None if cfg.stage == 2 => {
            return Err(Error::Usage("stage 2 needs stage-1 weights to start from".into()));
        }
        None => NetBundle::init(&cfg.net, seed)?,
    };
    let schedule = DiffusionSchedule::linear(&cfg.schedule)?;
    let perceptual = Perceptual::new(cfg.net.perceptual_channels);
    let mix_step = cfg.illumination_mix_step();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let sampler = sampler_config(cfg);
    let total_samples = (cfg.steps * cfg.batch) as u64;
    let mut samples = SampleStream::spawn(data, sampler.clone(), seed, 0, total_samples, cfg.workers, cfg.prefetch);
    let latent = cfg.net.latent_size();

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let stage1_mixed = cfg.stage == 1 && step >= mix_step;
        let frozen = |name: &str| -> bool {
            if cfg.stage == 2 {
                !stage2_trainable(name)
            } else {
                stage1_mixed && name.starts_with("motion.")
            }
        };
        let opts = ObjectiveOptions {
            lambda: cfg.lambda,
            with_illumination: cfg.stage == 2 || stage1_mixed,
            context_frames: if cfg.stage == 2 { cfg.context_frames } else { 0 },
            temporal: cfg.stage == 2,
        };

        let mut g = Graph::new();
        let mut f = Fwd::with_frozen(&mut g, &net.params, &frozen);
        let mut parts = Vec::with_capacity(cfg.batch);
        let mut ids = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let sample = samples
                .next()
                .ok_or_else(|| Error::Precondition("sample stream ended early".into()))??;
            let noise = SampleNoise::draw(seed, sample.sample_id, sample.target_frames.len(), latent, schedule.steps());
            ids.push(sample.sample_id);
            ts.push(noise.t);
            parts.push(sample_loss(&mut f, &cfg.net, &schedule, &perceptual, &sample, &noise, &opts)?);
        }
        let inv = 1.0 / cfg.batch as f64;
        let mean = |f: &mut Fwd, pick: fn(&crate::objective::LossVars) -> uniavatar_core::Var| -> Result<uniavatar_core::Var> {
            let mut acc = pick(&parts[0]);
            for p in &parts[1..] {
                acc = f.g.add(acc, pick(p))?;
            }
            Ok(f.g.scale(acc, inv))
        };
        let total = mean(&mut f, |l| l.total)?;
        let lat = mean(&mut f, |l| l.latent)?;
        let spa = mean(&mut f, |l| l.spatial)?;
        drop(f);

        let value = |v| g.value(v).item().unwrap_or(f64::NAN);
        let record = LossRecord {
            step,
            total: value(total),
            latent: value(lat),
            spatial: value(spa),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "latent {} spatial {} samples {ids:?} timesteps {ts:?}",
                    record.latent, record.spatial
                ),
            });
        }
        let grads = g.backward(total)?;
        let trainable = |name: &str| !frozen(name);
        let norm = Optimizer::grad_norm(&grads, &trainable);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {norm} for samples {ids:?} timesteps {ts:?}"),
            });
        }
        let scale = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            cfg.max_grad_norm / norm
        } else {
            1.0
        };
        opt.step(&mut net.params, &grads, &trainable, scale)?;
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { net, log })
}
