//! Latent noise loss, perceptual spatial loss and their weighted sum.

use uniavatar_core::rng::stream;
use uniavatar_core::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::schedule::spatial_weight;

/// Seed of the frozen perceptual feature extractor.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;
const NORM_EPS: f64 = 1e-10;

/// Mean squared error between predicted and true noise.
pub fn loss_latent(g: &mut Graph, eps: Var, eps_hat: Var) -> Result<Var> {
    if g.shape(eps) != g.shape(eps_hat) {
        return Err(Error::Dimension(format!(
            "noise {:?} and prediction {:?} differ",
            g.shape(eps),
            g.shape(eps_hat)
        )));
    }
    let d = g.sub(eps_hat, eps)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Frozen, randomly initialised three-layer convolutional feature
/// extractor. The distance is the mean over layers of the MSE between
/// channel-normalised features.
#[derive(Clone, Debug)]
pub struct Perceptual {
    kernels: Vec<Tensor>,
}

impl Perceptual {
    pub fn new(channels: [usize; 3]) -> Self {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = stream(PERCEPTUAL_SEED, "perceptual", 0);
        let mut prev = 3;
        let kernels = channels
            .iter()
            .map(|&c| {
                let std = (1.0 / (prev * 9) as f64).sqrt();
                let data = (0..c * prev * 9)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let t = Tensor::from_vec(&[c, prev, 3, 3], data);
                prev = c;
                t
            })
            .collect();
        Self { kernels }
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let kv = g.constant(k.clone());
            let y = g.conv2d(h, kv, 2, 1)?;
            h = g.silu(y);
            out.push(g.normalize_channels(h, NORM_EPS)?);
        }
        Ok(out)
    }

    /// Distance between two 3×H×W images in [−1, 1].
    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Dimension(format!(
                "perceptual inputs {:?} and {:?} differ",
                g.shape(a),
                g.shape(b)
            )));
        }
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            total = Some(match total {
                Some(t) => g.add(t, m)?,
                None => m,
            });
        }
        let total = total.expect("three layers");
        Ok(g.scale(total, 1.0 / self.kernels.len() as f64))
    }
}

/// cos(tπ/2T)·PerceptualDistance(I_p, I_GT).
pub fn loss_spatial(
    g: &mut Graph,
    predicted: Var,
    target: Var,
    t: usize,
    steps: usize,
    perceptual: &Perceptual,
) -> Result<Var> {
    if t == 0 {
        return Err(Error::Precondition(format!("timestep {t} outside 1..={steps}")));
    }
    let w = spatial_weight(t, steps)?;
    let d = perceptual.distance(g, predicted, target)?;
    Ok(g.scale(d, w))
}

/// latent + λ·spatial.
pub fn loss_total(g: &mut Graph, latent: Var, spatial: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!("lambda {lambda} must be non-negative")));
    }
    let s = g.scale(spatial, lambda);
    Ok(g.add(latent, s)?)
}
