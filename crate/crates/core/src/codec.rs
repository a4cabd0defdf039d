//! Exact space-to-depth codec between pixel rasters and latent token grids.
//!
//! Stands in for a learned autoencoder: every `f x f` RGB patch becomes one
//! token with `3 f^2` channels, ordered `(row-in-patch, col-in-patch, rgb)`.

use crate::error::{Error, Result};

/// RGB image, row-major `(y, x, c)`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageRaster {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Full-resolution single-channel mask; 1 marks product pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
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

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] > 0.5
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = if on { 1.0 } else { 0.0 };
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Token grid `(i, j, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub patch: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token(&self, i: usize, j: usize) -> &[f32] {
        let base = (i * self.w + j) * self.channels;
        &self.data[base..base + self.channels]
    }
}

/// Latent-resolution mask, one value per token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

fn check_divisible(height: usize, width: usize, f: usize) -> Result<()> {
    if f == 0 || height % f != 0 || width % f != 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "extents {height}x{width} not divisible by patch factor {f}"
        )));
    }
    Ok(())
}

pub fn encode(image: &ImageRaster, f: usize) -> Result<LatentGrid> {
    check_divisible(image.height, image.width, f)?;
    let (h, w) = (image.height / f, image.width / f);
    let channels = 3 * f * f;
    let mut data = Vec::with_capacity(h * w * channels);
    for i in 0..h {
        for j in 0..w {
            for di in 0..f {
                for dj in 0..f {
                    data.extend_from_slice(&image.pixel(i * f + di, j * f + dj));
                }
            }
        }
    }
    Ok(LatentGrid {
        h,
        w,
        channels,
        patch: f,
        data,
    })
}

pub fn decode(latent: &LatentGrid) -> Result<ImageRaster> {
    let f = latent.patch;
    if f == 0 || latent.channels != 3 * f * f {
        return Err(Error::Shape(format!(
            "latent has {} channels, patch factor {f} needs {}",
            latent.channels,
            3 * f * f
        )));
    }
    if latent.data.len() != latent.h * latent.w * latent.channels {
        return Err(Error::Shape(format!(
            "latent {}x{}x{} holds {} values",
            latent.h,
            latent.w,
            latent.channels,
            latent.data.len()
        )));
    }
    let mut image = ImageRaster::filled(latent.h * f, latent.w * f, [0.0; 3]);
    for i in 0..latent.h {
        for j in 0..latent.w {
            let tok = latent.token(i, j);
            for di in 0..f {
                for dj in 0..f {
                    let c = (di * f + dj) * 3;
                    image.set_pixel(i * f + di, j * f + dj, [tok[c], tok[c + 1], tok[c + 2]]);
                }
            }
        }
    }
    Ok(image)
}

/// Nearest (top-left) sampling of each `f x f` patch.
pub fn downsample_mask(mask: &Mask, f: usize) -> Result<MaskGrid> {
    check_divisible(mask.height, mask.width, f)?;
    if !mask.is_binary() {
        return Err(Error::Value("nearest mask downsampling needs a binary mask".into()));
    }
    let (h, w) = (mask.height / f, mask.width / f);
    let data = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .map(|(i, j)| mask.data[(i * f) * mask.width + j * f])
        .collect();
    Ok(MaskGrid { h, w, data })
}
