//! Separable Gaussian blur with reflect padding.

use crate::error::{Error, Result};
use crate::image::Image;

pub fn sigma(radius: usize) -> f64 {
    radius as f64 / 3.0
}

/// Normalized 1-D taps `g[-r..=r]`.
pub fn kernel_1d(radius: usize) -> Result<Vec<f64>> {
    if radius == 0 {
        return Err(Error::Precondition("blur radius must be at least 1".into()));
    }
    let s = sigma(radius);
    let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-((i * i) as f64) / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// The `(2r+1)²` kernel, row-major, as the outer product of [`kernel_1d`].
pub fn kernel_2d(radius: usize) -> Result<Vec<f64>> {
    let g = kernel_1d(radius)?;
    Ok(g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect())
}

/// Mirror index without edge repetition (`dcb|abcd|cba`).
pub fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

pub fn gaussian_blur(image: &Image, radius: usize) -> Result<Image> {
    blur_with_kernel(image, &kernel_1d(radius)?)
}

/// Applies a separable odd-length kernel along rows, then columns.
pub fn blur_with_kernel(image: &Image, taps: &[f64]) -> Result<Image> {
    if taps.len() % 2 == 0 {
        return Err(Error::Precondition(format!(
            "kernel length {} is not odd",
            taps.len()
        )));
    }
    let r = (taps.len() / 2) as i64;
    let (h, w) = image.dims();
    let mut tmp = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &g) in taps.iter().enumerate() {
                let p = image.get(y, reflect(x as i64 + k as i64 - r, w));
                for c in 0..3 {
                    acc[c] += g * p[c];
                }
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &g) in taps.iter().enumerate() {
                let p = tmp.get(reflect(y as i64 + k as i64 - r, h), x);
                for c in 0..3 {
                    acc[c] += g * p[c];
                }
            }
            out.set(y, x, acc);
        }
    }
    Ok(out)
}
