use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// Height × width × channels grid of values in `[0, 1]`, row-major with
/// channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::validation(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if channels == 0 {
            return Err(Error::validation("image needs at least one channel"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::validation(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, channels, pixels })
    }

    /// Skips validation; callers guarantee the invariants except the minimum
    /// side, which intermediate crops may violate.
    pub(crate) fn raw(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Image { height, width, channels, pixels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image::raw(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Bilinear resampling with half-pixel centers. Same-size resizes return
    /// an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut out = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &xs {
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) as f64 * (1.0 - fx) + self.get(y0, x1, c) as f64 * fx;
                    let bot = self.get(y1, x0, c) as f64 * (1.0 - fx) + self.get(y1, x1, c) as f64 * fx;
                    let v = top * (1.0 - fy) + bot * fy;
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image::raw(height, width, self.channels, out)
    }

    /// Scales so the shorter side equals `side`, preserving aspect ratio.
    pub fn resize_shorter(&self, side: usize) -> Image {
        let (h, w) = if self.height <= self.width {
            let w = ((self.width as f64 * side as f64 / self.height as f64).round() as usize).max(side);
            (side, w)
        } else {
            let h = ((self.height as f64 * side as f64 / self.width as f64).round() as usize).max(side);
            (h, side)
        };
        self.resize(h, w)
    }

    /// Copies the window with top-left `(top, left)`; panics if out of bounds.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut out = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            out.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Image::raw(height, width, self.channels, out)
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Image {
        self.crop((self.height - height) / 2, (self.width - width) / 2, height, width)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let start = self.index(y, x, 0);
                out.extend_from_slice(&self.pixels[start..start + self.channels]);
            }
        }
        Image::raw(self.height, self.width, self.channels, out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.channels],
            data: self.pixels.clone(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Image> {
        match t.dims[..] {
            [h, w, c] => Image::new(h, w, c, t.data),
            _ => Err(Error::integrity(format!("image tensor must be rank 3, got {:?}", t.dims))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let px = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        Image::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_small() {
        assert!(Image::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(Image::new(8, 8, 1, vec![f32::NAN; 64]).is_err());
        assert!(Image::new(4, 8, 1, vec![0.0; 32]).is_err());
        assert!(Image::new(8, 8, 1, vec![0.0; 63]).is_err());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let im = ramp(9, 12);
        assert_eq!(im.resize(9, 12), im);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let im = Image::filled(10, 10, 3, 0.25);
        let r = im.resize(17, 6);
        assert!(r.pixels().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn double_flip_and_crop_geometry() {
        let im = ramp(8, 10);
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_horizontal().get(0, 0, 0), im.get(0, 9, 0));
        let c = im.crop(2, 3, 4, 5);
        assert_eq!(c.get(0, 0, 0), im.get(2, 3, 0));
        assert_eq!(c.get(3, 4, 0), im.get(5, 7, 0));
    }

    #[test]
    fn resize_shorter_keeps_aspect() {
        let im = Image::filled(10, 20, 1, 0.0);
        let r = im.resize_shorter(16);
        assert_eq!((r.height(), r.width()), (16, 32));
    }
}
