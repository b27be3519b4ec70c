//! In-memory images and masks.

use crate::error::{Error, Result};

/// Linear RGB image with `f64` channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Image {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = ((self.width / factor).max(1), (self.height / factor).max(1));
        let mut out = Image::new(w, h, [0.0; 3]);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let c = self.get(
                            (x * factor + dx).min(self.width - 1),
                            (y * factor + dy).min(self.height - 1),
                        );
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                out.set(x, y, acc.map(|v| v * norm));
            }
        }
        out
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        check_same_size(self.width, self.height, other.width, other.height)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>())
            .sum();
        Ok(sum / (3 * self.data.len()).max(1) as f64)
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// A pixel of the downsampled mask is foreground when the majority of
    /// its footprint is.
    pub fn downsample(&self, factor: usize) -> Mask {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = ((self.width / factor).max(1), (self.height / factor).max(1));
        let mut out = Mask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let mut count = 0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        if self.get(
                            (x * factor + dx).min(self.width - 1),
                            (y * factor + dy).min(self.height - 1),
                        ) {
                            count += 1;
                        }
                    }
                }
                out.data[y * w + x] = 2 * count > factor * factor;
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn check_same_size(w0: usize, h0: usize, w1: usize, h1: usize) -> Result<()> {
    if w0 != w1 || h0 != h1 {
        return Err(Error::Dimension(format!(
            "image sizes differ: {w0}x{h0} vs {w1}x{h1}"
        )));
    }
    Ok(())
}
