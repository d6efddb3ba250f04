use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// H×W×3 image with `f64` channels, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn bit_eq(&self, other: &Image) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sum of absolute differences between horizontally and vertically
    /// adjacent samples, over all channels.
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(y, x);
                if x + 1 < self.width {
                    let q = self.get(y, x + 1);
                    tv += (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>();
                }
                if y + 1 < self.height {
                    let q = self.get(y + 1, x);
                    tv += (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>();
                }
            }
        }
        tv
    }

    /// Channel-planar 3×H×W copy with values mapped from [0,1] to [−1,1].
    pub fn to_planar_signed(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_planar_signed`], clamping to [0,1].
    pub fn from_planar_signed(height: usize, width: usize, planar: &[f64]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * 3 {
            return Err(Error::Dimension(format!(
                "planar buffer of {} values for a {height}×{width} image",
                planar.len()
            )));
        }
        let mut data = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                data.push(((planar[c * plane + p] + 1.0) * 0.5).clamp(0.0, 1.0));
            }
        }
        Self::from_data(height, width, data)
    }

    /// Rounds every channel to the nearest 8-bit level, as stored in PNG.
    pub fn quantized(&self) -> Self {
        self.map(|v| to_u8(v) as f64 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let [r, g, b] = self.get(y, x);
                img.put_pixel(x as u32, y as u32, Rgb([to_u8(r), to_u8(g), to_u8(b)]));
            }
        }
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect();
        Self::from_data(h as usize, w as usize, data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// H×W boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension("mask sizes differ".into()));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Soft mask in [0,1] (1 inside).
    pub fn to_alpha(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, Luma([if self.get(y, x) { 255 } else { 0 }]));
            }
        }
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads a single-channel PNG; pixels at or above half intensity are set.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] >= 128).collect();
        Self::from_data(h as usize, w as usize, data)
    }
}
