use std::fs;
use std::path::Path;

use rand::Rng;
use uniavatar_render::Image;

use crate::error::{Error, IoContext, Result};
use crate::pool::BACKGROUND_DIR;

pub fn background_name(i: usize) -> String {
    format!("bg_{i:03}.png")
}

/// Background images, relative to the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundBank {
    pub paths: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl BackgroundBank {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Loads the bank under `<root>/backgrounds`, checking every image has
    /// the same size.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join(BACKGROUND_DIR);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Dataset(format!("no backgrounds in {}", dir.display())));
        }
        let mut dims = None;
        for n in &names {
            let img = Image::load_png(&dir.join(n))?;
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(Error::Dataset(format!(
                        "background {n} is {:?}, expected {d:?}",
                        img.dims()
                    )))
                }
                _ => {}
            }
        }
        let (height, width) = dims.expect("non-empty bank");
        Ok(Self {
            paths: names.iter().map(|n| format!("{BACKGROUND_DIR}/{n}")).collect(),
            height,
            width,
        })
    }
}

/// A smooth two-colour gradient with low-amplitude value noise on top.
pub fn procedural_background<R: Rng>(height: usize, width: usize, rng: &mut R) -> Image {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let cells = 4;
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-0.08..0.08))
        .collect();
    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width.max(2).saturating_sub(1) as f64;
            let v = y as f64 / height.max(2).saturating_sub(1) as f64;
            let t = (((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let (gx, gy) = (u * cells as f64, v * cells as f64);
            let (ix, iy) = ((gx as usize).min(cells - 1), (gy as usize).min(cells - 1));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize| grid[j * (cells + 1) + i];
            let noise = at(ix, iy) * (1.0 - fx) * (1.0 - fy)
                + at(ix + 1, iy) * fx * (1.0 - fy)
                + at(ix, iy + 1) * (1.0 - fx) * fy
                + at(ix + 1, iy + 1) * fx * fy;
            img.set(
                y,
                x,
                std::array::from_fn(|c| (c0[c] * (1.0 - t) + c1[c] * t + noise).clamp(0.0, 1.0)),
            );
        }
    }
    img
}

/// `mask ⊙ frame + (1 − mask) ⊙ background`, with `alpha` in [0,1] per
/// pixel.
pub fn composite_background(frame: &Image, alpha: &[f64], background: &Image) -> Result<Image> {
    let (h, w) = frame.dims();
    if background.dims() != (h, w) || alpha.len() != h * w {
        return Err(Error::Precondition(format!(
            "composite of a {h}×{w} frame with a {:?} background and {} mask values",
            background.dims(),
            alpha.len()
        )));
    }
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let a = alpha[y * w + x].clamp(0.0, 1.0);
            let (f, b) = (frame.get(y, x), background.get(y, x));
            out.set(y, x, std::array::from_fn(|c| a * f[c] + (1.0 - a) * b[c]));
        }
    }
    Ok(out)
}
