//! Motion encoder, illumination encoder, reference twin and the denoiser.
//!
//! Parameter names are prefixed by network: `motion.`, `illum.`, `ref.`
//! and `den.`.

use uniavatar_core::rng::stream;
use uniavatar_core::{cross_attention, self_attention, ParamSet, Tensor, Var};

use crate::config::{NetConfig, DOWNSAMPLE_AFTER, LATENT_CHANNELS, SITES, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::layers::{adaln_modulate, gate_fuse, hw, timestep_embedding, Fwd, Init};

/// Init gain of the illumination convs; keeps activations from decaying
/// through the silu stack.
const ILLUM_GAIN: f64 = 2.0;

/// Network weights together with the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct NetBundle {
    pub config: NetConfig,
    pub params: ParamSet,
}

impl NetBundle {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: init_params(config, seed),
        })
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}

fn init_params(cfg: &NetConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    build(&mut Init::new(&mut params, stream(seed, "init", 0)), cfg);
    params
}

/// `(name, shape)` of every parameter, sorted by name, without allocating
/// any weights.
pub fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut b = Init::layout_only(stream(0, "init", 0));
    build(&mut b, cfg);
    let mut layout = b.layout;
    layout.sort();
    layout
}

fn build(b: &mut Init, cfg: &NetConfig) {
    let ch = cfg.channels;

    let mut prev = 3;
    for (i, &c) in cfg.stem_channels.iter().enumerate() {
        b.conv(&format!("motion.stem{i}"), prev, c, 3);
        prev = c;
    }
    for i in 0..SITES {
        b.resblock(&format!("motion.block{i}"), prev, ch[i], None);
        if i >= 4 {
            b.layer_norm(&format!("motion.attn{i}.ln"), ch[i]);
            b.attention(&format!("motion.attn{i}"), ch[i], ch[i], false);
        }
        if DOWNSAMPLE_AFTER.contains(&i) {
            b.conv(&format!("motion.down{i}"), ch[i], ch[i], 3);
        }
        prev = ch[i];
    }

    let mut prev = 3;
    for (i, &c) in cfg.illum_channels.iter().enumerate() {
        b.conv_gain(&format!("illum.conv{i}"), prev, c, 3, ILLUM_GAIN);
        prev = c;
    }
    b.layer_norm("illum.attn.ln", prev);
    b.attention("illum.attn", prev, prev, false);
    b.zero_conv("illum.out", prev, ch[0], 3);

    b.conv("ref.conv_in", LATENT_CHANNELS, ch[0], 3);
    let mut prev = ch[0];
    for i in 0..SITES {
        b.resblock(&format!("ref.block{i}"), prev, ch[i], None);
        if DOWNSAMPLE_AFTER.contains(&i) {
            b.conv(&format!("ref.down{i}"), ch[i], ch[i], 3);
        }
        prev = ch[i];
    }

    let td = cfg.time_dim;
    b.linear("den.time", td, td);
    b.conv("den.conv_in", LATENT_CHANNELS, ch[0], 3);
    let mut prev = ch[0];
    for i in 0..SITES {
        let c = ch[i];
        b.resblock(&format!("den.block{i}"), prev, c, Some(td));
        b.layer_norm(&format!("den.sa{i}.ln"), c);
        b.attention(&format!("den.sa{i}"), c, c, false);
        b.layer_norm(&format!("den.ca{i}.ln"), c);
        b.attention(&format!("den.ca{i}"), c, c, false);
        b.linear(&format!("den.adaln{i}.l1"), cfg.expr_dims, cfg.adaln_hidden);
        b.zero_linear(&format!("den.adaln{i}.l2"), cfg.adaln_hidden, 2 * c);
        b.attention(&format!("den.aa{i}"), c, cfg.audio_dim, true);
        b.layer_norm(&format!("den.tmp{i}.ln"), c);
        b.attention(&format!("den.tmp{i}"), c, c, true);
        if DOWNSAMPLE_AFTER.contains(&i) {
            b.conv(&format!("den.down{i}"), c, c, 3);
        }
        prev = c;
    }
    b.resblock("den.up0", ch[5] + ch[4], ch[5], Some(td));
    b.resblock("den.up1", ch[5] + ch[3], ch[3], Some(td));
    b.resblock("den.up2", ch[3] + ch[1], ch[1], Some(td));
    b.conv("den.conv_out", ch[1], LATENT_CHANNELS, 3);
}

/// Parameters updated in training stage 2: temporal attention, audio
/// attention and the AdaLN heads.
pub fn stage2_trainable(name: &str) -> bool {
    name.starts_with("den.tmp") || name.starts_with("den.aa") || name.starts_with("den.adaln")
}

fn check_square_input(f: &Fwd, cfg: &NetConfig, x: Var, what: &str) -> Result<()> {
    let s = f.g.shape(x);
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("{what} must be 3×H×W, got {s:?}")));
    }
    if s[1] != cfg.resolution || s[2] != cfg.resolution {
        return Err(Error::Dimension(format!(
            "{what} is {}×{}, network expects {}²",
            s[1], s[2], cfg.resolution
        )));
    }
    Ok(())
}

/// Motion taps p_1..p_6 of a guidance image in [−1, 1].
pub fn motion_encode(f: &mut Fwd, cfg: &NetConfig, guidance: Var) -> Result<Vec<Var>> {
    let s = f.g.shape(guidance).to_vec();
    if s.len() == 3 && (s[1] % SIZE_MULTIPLE != 0 || s[2] % SIZE_MULTIPLE != 0) {
        return Err(Error::Config(format!(
            "motion guidance {}×{} is not divisible by {SIZE_MULTIPLE}",
            s[1], s[2]
        )));
    }
    check_square_input(f, cfg, guidance, "motion guidance")?;
    let mut h = guidance;
    for i in 0..3 {
        h = f.conv(&format!("motion.stem{i}"), h, 2)?;
        if i < 2 {
            h = f.g.silu(h);
        }
    }
    let mut taps = Vec::with_capacity(SITES);
    for i in 0..SITES {
        h = f.resblock(&format!("motion.block{i}"), h, None)?;
        if i >= 4 {
            h = f.spatial_self_attention(&format!("motion.attn{i}"), h, cfg.heads)?;
        }
        taps.push(h);
        if DOWNSAMPLE_AFTER.contains(&i) {
            h = f.conv(&format!("motion.down{i}"), h, 2)?;
        }
    }
    Ok(taps)
}

/// Feature map added to the denoiser input, `c_1 × (R/8)²`.
pub fn illumination_encode(f: &mut Fwd, cfg: &NetConfig, guidance: Var) -> Result<Var> {
    check_square_input(f, cfg, guidance, "illumination guidance")?;
    // back to [0, 1] so unlit pixels are exactly zero and features scale
    // with the light level
    let h = f.g.scale(guidance, 0.5);
    let mut h = f.g.offset(h, 0.5);
    for (i, &stride) in cfg.illum_strides.iter().enumerate() {
        h = f.conv(&format!("illum.conv{i}"), h, stride)?;
        h = f.g.silu(h);
    }
    h = f.spatial_self_attention("illum.attn", h, cfg.heads)?;
    f.conv("illum.out", h, 1)
}

/// Per-site reference tokens from the reference latent.
pub fn reference_encode(f: &mut Fwd, cfg: &NetConfig, latent: Var) -> Result<Vec<Var>> {
    check_latent(f, cfg, latent)?;
    let mut h = f.conv("ref.conv_in", latent, 1)?;
    let mut out = Vec::with_capacity(SITES);
    for i in 0..SITES {
        h = f.resblock(&format!("ref.block{i}"), h, None)?;
        out.push(f.g.to_tokens(h)?);
        if DOWNSAMPLE_AFTER.contains(&i) {
            h = f.conv(&format!("ref.down{i}"), h, 2)?;
        }
    }
    Ok(out)
}

fn check_latent(f: &Fwd, cfg: &NetConfig, z: Var) -> Result<()> {
    let n = cfg.latent_size();
    if f.g.shape(z) != [LATENT_CHANNELS, n, n] {
        return Err(Error::Dimension(format!(
            "latent must be {LATENT_CHANNELS}×{n}×{n}, got {:?}",
            f.g.shape(z)
        )));
    }
    Ok(())
}

/// Conditions of one frame; `None` means dropped or absent, and the
/// matching fusion sites are bypassed.
#[derive(Clone, Debug, Default)]
pub struct Conditions {
    /// Output of [`reference_encode`].
    pub reference: Option<Vec<Var>>,
    /// Output of [`motion_encode`].
    pub motion: Option<Vec<Var>>,
    /// Output of [`illumination_encode`].
    pub illumination: Option<Var>,
    /// `window × audio_dim` rows.
    pub audio: Option<Var>,
    /// `1 × expr_dims`.
    pub expression: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FrameInput {
    pub z: Var,
    /// Diffusion timestep; 0 marks a clean context frame.
    pub t: usize,
    pub cond: Conditions,
}

/// (γ, b) of site `i`, each `[C]`; zero constants without an expression.
pub fn adaln_head(f: &mut Fwd, cfg: &NetConfig, site: usize, expression: Option<Var>) -> Result<(Var, Var)> {
    let c = cfg.channels[site];
    let Some(e) = expression else {
        let gamma = f.g.constant(Tensor::zeros(&[c]));
        let beta = f.g.constant(Tensor::zeros(&[c]));
        return Ok((gamma, beta));
    };
    if f.g.shape(e) != [1, cfg.expr_dims] {
        return Err(Error::Dimension(format!(
            "expression embedding must be 1×{}, got {:?}",
            cfg.expr_dims,
            f.g.shape(e)
        )));
    }
    let h = f.linear(&format!("den.adaln{site}.l1"), e)?;
    let h = f.g.silu(h);
    let gb = f.linear(&format!("den.adaln{site}.l2"), h)?;
    let gamma = f.g.slice_cols(gb, 0, c)?;
    let beta = f.g.slice_cols(gb, c, c)?;
    Ok((f.g.reshape(gamma, &[c])?, f.g.reshape(beta, &[c])?))
}

/// Self-attention across frames at every token position. `xs` holds one
/// `N×C` token matrix per frame.
fn temporal_attention(f: &mut Fwd, name: &str, xs: &[Var], heads: usize) -> Result<Vec<Var>> {
    let n_frames = xs.len();
    let (n, c) = {
        let s = f.g.shape(xs[0]);
        (s[0], s[1])
    };
    let mut stacked = Vec::with_capacity(n_frames);
    for &x in xs {
        stacked.push(f.g.reshape(x, &[1, n, c])?);
    }
    let stack = f.g.concat_rows(&stacked)?;
    let by_pos = f.g.permute01(stack)?;
    let rows = f.g.reshape(by_pos, &[n * n_frames, c])?;
    let normed = f.layer_norm(&format!("{name}.ln"), rows)?;
    let w = f.attention_weights(name, heads)?;
    let q = f.g.matmul(normed, w.wq)?;
    let k = f.g.matmul(normed, w.wk)?;
    let v = f.g.matmul(normed, w.wv)?;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut part = |m: Var| -> Result<Var> {
            let s = f.g.slice_cols(m, h * dh, dh)?;
            Ok(f.g.reshape(s, &[n, n_frames, dh])?)
        };
        let (qh, kh, vh) = (part(q)?, part(k)?, part(v)?);
        let kt = f.g.transpose_last2(kh)?;
        let scores = f.g.bmm(qh, kt)?;
        let scores = f.g.scale(scores, scale);
        let probs = f.g.softmax(scores);
        let o = f.g.bmm(probs, vh)?;
        outs.push(f.g.reshape(o, &[n * n_frames, dh])?);
    }
    let merged = if heads == 1 { outs[0] } else { f.g.concat_cols(&outs)? };
    let o = f.g.matmul(merged, w.wo)?;
    let o = f.g.reshape(o, &[n, n_frames, c])?;
    let o = f.g.permute01(o)?;
    let out = f.g.add(stack, o)?;
    let mut res = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let s = f.g.slice_rows(out, k, 1)?;
        res.push(f.g.reshape(s, &[n, c])?);
    }
    Ok(res)
}

/// Predicted noise ε̂ for each frame. With `temporal` and more than one
/// frame, the frames also attend to each other at every site.
pub fn denoise_predict(f: &mut Fwd, cfg: &NetConfig, frames: &[FrameInput], temporal: bool) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::Precondition("denoise_predict needs at least one frame".into()));
    }
    let mut h = Vec::with_capacity(frames.len());
    let mut temb = Vec::with_capacity(frames.len());
    for fr in frames {
        check_latent(f, cfg, fr.z)?;
        let mut x = f.conv("den.conv_in", fr.z, 1)?;
        if let Some(ill) = fr.cond.illumination {
            if f.g.shape(ill) != f.g.shape(x) {
                return Err(Error::Dimension(format!(
                    "illumination feature {:?} does not match {:?}",
                    f.g.shape(ill),
                    f.g.shape(x)
                )));
            }
            x = f.g.add(x, ill)?;
        }
        h.push(x);
        let e = f.g.constant(timestep_embedding(fr.t as f64, cfg.time_dim));
        let e = f.linear("den.time", e)?;
        temb.push(f.g.silu(e));
    }

    let mut skips: Vec<Vec<Var>> = vec![Vec::with_capacity(SITES); frames.len()];
    for i in 0..SITES {
        let mut xs = Vec::with_capacity(frames.len());
        let mut grid = (0, 0);
        for (k, fr) in frames.iter().enumerate() {
            let hk = f.resblock(&format!("den.block{i}"), h[k], Some(temb[k]))?;
            grid = hw(f.g, hk)?;
            let x = f.g.to_tokens(hk)?;

            let n = f.layer_norm(&format!("den.sa{i}.ln"), x)?;
            let w = f.attention_weights(&format!("den.sa{i}"), cfg.heads)?;
            let mut s = self_attention(f.g, n, &w)?;
            if let Some(taps) = &fr.cond.motion {
                let p = f.g.to_tokens(taps[i])?;
                s = gate_fuse(f.g, s, p)?;
            }
            let mut x = f.g.add(x, s)?;

            if let Some(r) = &fr.cond.reference {
                let n = f.layer_norm(&format!("den.ca{i}.ln"), x)?;
                let w = f.attention_weights(&format!("den.ca{i}"), cfg.heads)?;
                let a = cross_attention(f.g, n, r[i], &w)?;
                x = f.g.add(x, a)?;
            }

            if let Some(audio) = fr.cond.audio {
                let (gamma, beta) = adaln_head(f, cfg, i, fr.cond.expression)?;
                let m = adaln_modulate(f.g, x, gamma, beta)?;
                let w = f.attention_weights(&format!("den.aa{i}"), cfg.heads)?;
                let a = cross_attention(f.g, m, audio, &w)?;
                x = f.g.add(x, a)?;
            }
            xs.push(x);
        }
        if temporal && frames.len() > 1 {
            xs = temporal_attention(f, &format!("den.tmp{i}"), &xs, cfg.heads)?;
        }
        for (k, x) in xs.into_iter().enumerate() {
            let hk = f.g.from_tokens(x, grid.0, grid.1)?;
            skips[k].push(hk);
            h[k] = if DOWNSAMPLE_AFTER.contains(&i) {
                f.conv(&format!("den.down{i}"), hk, 2)?
            } else {
                hk
            };
        }
    }

    let mut out = Vec::with_capacity(frames.len());
    for k in 0..frames.len() {
        let e = &skips[k];
        let d = f.g.concat_rows(&[e[5], e[4]])?;
        let d = f.resblock("den.up0", d, Some(temb[k]))?;
        let d = f.g.upsample(d, 2)?;
        let d = f.g.concat_rows(&[d, e[3]])?;
        let d = f.resblock("den.up1", d, Some(temb[k]))?;
        let d = f.g.upsample(d, 2)?;
        let d = f.g.concat_rows(&[d, e[1]])?;
        let d = f.resblock("den.up2", d, Some(temb[k]))?;
        let d = f.pixel_norm(d)?;
        let d = f.g.silu(d);
        out.push(f.conv("den.conv_out", d, 1)?);
    }
    Ok(out)
}
