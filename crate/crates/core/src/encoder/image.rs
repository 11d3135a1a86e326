use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Single-channel intensity grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::contract(format!(
                "image of {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::contract("image contains non-finite pixels"));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid fill")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }
}

/// Intensity normalization applied before the patch encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.5, std: 0.5 }
    }
}

/// Scales raw 0-255 intensities by 1/256 and standardizes them. In training
/// mode one rectangle covering at most a quarter of the grid is zeroed with
/// probability 0.5, drawn from `seed`.
pub fn augment_image(img: &ImageGrid, norm: Normalization, seed: u64, train: bool) -> ImageGrid {
    let mut out = img.clone();
    for p in &mut out.pixels {
        *p = (*p / 256.0 - norm.mean) / norm.std;
    }
    if train {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.random_bool(0.5) {
            let (h, w) = (img.height, img.width);
            let max_area = (h * w) / 4;
            let eh = rng.random_range(1..=h.min(max_area).max(1));
            let ew = rng.random_range(1..=(max_area / eh).clamp(1, w));
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            for r in top..top + eh {
                for c in left..left + ew {
                    out.set(r, c, 0.0);
                }
            }
        }
    }
    out
}
