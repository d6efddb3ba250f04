//! The toy latent space: an 8× average-pooled image in [−1, 1].

use uniavatar_core::{Graph, Tensor, Var};
use uniavatar_render::Image;

use crate::config::{LATENT_CHANNELS, LATENT_FACTOR};
use crate::error::{Error, Result};

/// 3×H×W tensor of the image mapped to [−1, 1].
pub fn image_tensor(img: &Image) -> Tensor {
    let (h, w) = img.dims();
    Tensor::from_vec(&[3, h, w], img.to_planar_signed())
}

pub fn encode_latent(img: &Image) -> Result<Tensor> {
    let (h, w) = img.dims();
    if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
        return Err(Error::Dimension(format!(
            "{h}×{w} image is not divisible by {LATENT_FACTOR}"
        )));
    }
    let planar = img.to_planar_signed();
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let mut out = vec![0.0; LATENT_CHANNELS * lh * lw];
    let norm = 1.0 / (LATENT_FACTOR * LATENT_FACTOR) as f64;
    for c in 0..LATENT_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out[(c * lh + y / LATENT_FACTOR) * lw + x / LATENT_FACTOR] += planar[(c * h + y) * w + x] * norm;
            }
        }
    }
    Ok(Tensor::from_vec(&[LATENT_CHANNELS, lh, lw], out))
}

/// Nearest-neighbour decode back to image resolution, inside the graph.
pub fn decode_latent(g: &mut Graph, z: Var) -> Result<Var> {
    Ok(g.upsample(z, LATENT_FACTOR)?)
}

/// Decodes a latent tensor to an image, clamping to [0, 1].
pub fn latent_to_image(z: &Tensor) -> Result<Image> {
    let &[c, lh, lw] = z.shape() else {
        return Err(Error::Dimension(format!("latent must be 3×h×w, got {:?}", z.shape())));
    };
    if c != LATENT_CHANNELS {
        return Err(Error::Dimension(format!("latent has {c} channels")));
    }
    let (h, w) = (lh * LATENT_FACTOR, lw * LATENT_FACTOR);
    let mut planar = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                planar[(c * h + y) * w + x] = z.data()[(c * lh + y / LATENT_FACTOR) * lw + x / LATENT_FACTOR];
            }
        }
    }
    Ok(Image::from_planar_signed(h, w, &planar)?)
}
