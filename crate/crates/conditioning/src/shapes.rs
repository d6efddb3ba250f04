//! Symbolic shape propagation through the encoders, without allocating
//! any tensors.

use std::fmt::Write as _;

use uniavatar_core::shape;

use crate::config::{NetConfig, DOWNSAMPLE_AFTER, SITES, SIZE_MULTIPLE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: Vec<usize>,
    /// Motion taps as C×H×W.
    pub taps: Vec<Vec<usize>>,
    /// Motion taps as token matrices (H·W)×C.
    pub tap_tokens: Vec<Vec<usize>>,
    pub illumination: Vec<usize>,
    pub latent: Vec<usize>,
}

fn conv(x: &[usize], cout: usize, k: usize, stride: usize) -> Result<Vec<usize>> {
    Ok(shape::conv2d(x, &[cout, x[0], k, k], stride, k / 2)?)
}

fn resblock(x: &[usize], cout: usize) -> Result<Vec<usize>> {
    let h = conv(x, cout, 3, 1)?;
    let h = conv(&h, cout, 3, 1)?;
    let skip = if x[0] != cout { conv(x, cout, 1, 1)? } else { x.to_vec() };
    Ok(shape::same(&skip, &h)?)
}

fn attention(x: &[usize], heads: usize) -> Result<Vec<usize>> {
    let tok = shape::tokens(x)?;
    shape::heads(tok[1], heads)?;
    let q = shape::matmul(&tok, &[tok[1], tok[1]])?;
    let scores = shape::matmul(&q, &shape::transpose(&q)?)?;
    let out = shape::matmul(&scores, &q)?;
    shape::same(&tok, &out)?;
    Ok(x.to_vec())
}

/// Propagates a `3 × R × R` input through the motion and illumination
/// encoders.
pub fn plan_shapes(cfg: &NetConfig) -> Result<ShapePlan> {
    cfg.validate()?;
    let r = cfg.resolution;
    if r % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!("{r} is not divisible by {SIZE_MULTIPLE}")));
    }
    let input = vec![3, r, r];

    let mut h = input.clone();
    for &c in &cfg.stem_channels {
        h = conv(&h, c, 3, 2)?;
    }
    let mut taps = Vec::with_capacity(SITES);
    for i in 0..SITES {
        h = resblock(&h, cfg.channels[i])?;
        if i >= 4 {
            h = attention(&h, cfg.heads)?;
        }
        taps.push(h.clone());
        if DOWNSAMPLE_AFTER.contains(&i) {
            h = conv(&h, cfg.channels[i], 3, 2)?;
        }
    }
    let tap_tokens = taps.iter().map(|t| shape::tokens(t)).collect::<std::result::Result<_, _>>()?;

    let mut h = input.clone();
    for (&c, &s) in cfg.illum_channels.iter().zip(&cfg.illum_strides) {
        h = conv(&h, c, 3, s)?;
    }
    h = attention(&h, cfg.heads)?;
    let illumination = conv(&h, cfg.channels[0], 3, 1)?;
    let latent = shape::avg_pool(&input, crate::config::LATENT_FACTOR)?;
    Ok(ShapePlan {
        input,
        taps,
        tap_tokens,
        illumination,
        latent,
    })
}

fn dims(s: &[usize]) -> String {
    s.iter().map(ToString::to_string).collect::<Vec<_>>().join("×")
}

impl ShapePlan {
    /// Human-readable table, one row per tensor.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:<16} {}", "tensor", "shape", "tokens");
        let _ = writeln!(out, "{:<14} {:<16} -", "input", dims(&self.input));
        for (i, (t, k)) in self.taps.iter().zip(&self.tap_tokens).enumerate() {
            let _ = writeln!(out, "{:<14} {:<16} {}", format!("motion.p{}", i + 1), dims(t), dims(k));
        }
        let _ = writeln!(out, "{:<14} {:<16} -", "illumination", dims(&self.illumination));
        let _ = writeln!(out, "{:<14} {:<16} -", "latent", dims(&self.latent));
        out
    }
}
