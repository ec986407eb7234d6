//! 8-bit RGB images and the crop transforms used for training and evaluation.

use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, Real, Result, Tensor};

/// Row-major, interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidShape {
                shape: alloc::vec![height, width, 3],
                len: data.len(),
            });
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> RgbImage {
        assert!(left + width <= self.width && top + height <= self.height, "crop window out of bounds");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        RgbImage { width, height, data }
    }

    /// Nearest-neighbour upscale, preserving aspect ratio, until both sides
    /// are at least the requested size. Larger images are returned as is.
    pub fn cover(&self, min_width: usize, min_height: usize) -> RgbImage {
        if self.width >= min_width && self.height >= min_height {
            return self.clone();
        }
        // Scale factor as the smallest rational that covers both sides.
        let (num, den) = if min_width * self.height >= min_height * self.width {
            (min_width, self.width)
        } else {
            (min_height, self.height)
        };
        let w = (self.width * num).div_ceil(den).max(min_width);
        let h = (self.height * num).div_ceil(den).max(min_height);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let sy = (y * self.height / h).min(self.height - 1);
            for x in 0..w {
                let sx = (x * self.width / w).min(self.width - 1);
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        RgbImage { width: w, height: h, data }
    }

    /// `[H, W, 3]` with values scaled to `[0, 1]`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|&v| F::of(v as f64 / 255.0)).collect();
        Tensor::new(alloc::vec![self.height, self.width, 3], data).expect("consistent image shape")
    }
}

/// Uniformly placed `out_w x out_h` window, after upscaling small images.
pub fn random_crop<R: Rng + ?Sized>(image: &RgbImage, out_w: usize, out_h: usize, rng: &mut R) -> RgbImage {
    let img = image.cover(out_w, out_h);
    let left = rng.gen_range(0..=img.width - out_w);
    let top = rng.gen_range(0..=img.height - out_h);
    img.crop(left, top, out_w, out_h)
}

pub fn center_crop(image: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    let img = image.cover(out_w, out_h);
    img.crop((img.width - out_w) / 2, (img.height - out_h) / 2, out_w, out_h)
}
