//! Planar RGB images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three-channel planar image: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::filled(width, height, 0.0);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    /// Builds from interleaved `RGBRGB...` samples.
    pub fn from_interleaved(width: usize, height: usize, rgb: &[f64]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "interleaved buffer has {} values, expected {}",
                rgb.len(),
                3 * width * height
            )));
        }
        Ok(Self::from_fn(width, height, |c, y, x| {
            rgb[(y * width + x) * 3 + c]
        }))
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for c in 0..3 {
                out.push(self.data[c * plane + i]);
            }
        }
        out
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn expect_same_size(&self, other: &Image) -> Result<()> {
        if !self.same_size(other) {
            return Err(Error::Shape(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.expect_same_size(other)?;
        Ok(Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Rec.709 luminance per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.pixel_count())
            .map(|i| luminance(r[i], g[i], b[i]))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3, self.height, self.width], self.data.clone())
            .expect("image buffer always matches its shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!(
                "expected a [1, 3, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        Image::new(w, h, t.data().to_vec())
    }

    /// Pads right and bottom with edge replication up to a multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Image {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        Image::from_fn(w, h, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    /// Top-left `width x height` region.
    pub fn crop(&self, width: usize, height: usize) -> Result<Image> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "cannot crop {}x{} image to {width}x{height}",
                self.width, self.height
            )));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        Ok(Image::from_fn(width, height, |c, y, x| self.get(c, y, x)))
    }
}

pub const REC709: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[inline]
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    REC709[0] * r + REC709[1] * g + REC709[2] * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_round_trip() {
        let rgb: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let img = Image::from_interleaved(3, 2, &rgb).unwrap();
        assert_eq!(img.get(1, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 2), 15.0);
        assert_eq!(img.to_interleaved(), rgb);
    }

    #[test]
    fn pad_replicates_edges_and_crop_restores() {
        let img = Image::from_fn(5, 3, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let padded = img.pad_to_multiple(8);
        assert_eq!((padded.width(), padded.height()), (8, 8));
        assert_eq!(padded.get(2, 7, 7), img.get(2, 2, 4));
        assert_eq!(padded.get(0, 1, 6), img.get(0, 1, 4));
        assert_eq!(padded.crop(5, 3).unwrap(), img);
    }

    #[test]
    fn luminance_weights_sum_to_one() {
        assert!((luminance(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
    }
}
