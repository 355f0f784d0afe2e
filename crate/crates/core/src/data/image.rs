use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use super::{DataError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Interleaved RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        img.data.chunks_exact_mut(3).for_each(|p| p.copy_from_slice(&rgb));
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `1 x 3 x H x W` network input, mapped from [0, 1] to [-1, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |i| {
            let (c, p) = (i / plane, i % plane);
            T::lit(self.data[3 * p + c] as f64 * 2.0 - 1.0)
        })
    }

    /// Writes 8-bit PNG; values are rounded after clamping to [0, 1].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer size matches");
        buf.save(path).map_err(|e| DataError::image(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| DataError::image(path, e))?.to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }

    /// Rounds to the 8-bit grid so the image survives a PNG roundtrip.
    pub fn quantize(&mut self) {
        self.data.iter_mut().for_each(|v| *v = to_u8(*v) as f32 / 255.0);
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 16-bit depth PNG storing `depth_mm / depth_scale`.
pub fn save_depth_png(path: &Path, depth: &[f32], width: usize, height: usize, depth_scale: f64) -> Result<()> {
    let raw: Vec<u16> = depth
        .iter()
        .map(|&d| (d as f64 / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| DataError::image(path, e))
}

/// Reads a 16-bit depth PNG and scales it to millimetres.
pub fn load_depth_png(path: &Path, depth_scale: f64) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| DataError::image(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let depth = img.into_raw().into_iter().map(|v| (v as f64 * depth_scale) as f32).collect();
    Ok((depth, w, h))
}

pub fn save_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        width as u32,
        height as u32,
        mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| DataError::image(path, e))
}

pub fn load_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| DataError::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|v| v > 127).collect(), w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 6.0;
        }
        img.quantize();
        let p = dir.path().join("rgb.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);

        let depth: Vec<f32> = (0..15).map(|i| i as f32 * 100.5).collect();
        let p = dir.path().join("depth.png");
        save_depth_png(&p, &depth, 5, 3, 0.1).unwrap();
        let (back, w, h) = load_depth_png(&p, 0.1).unwrap();
        assert_eq!((w, h), (5, 3));
        for (a, b) in depth.iter().zip(&back) {
            assert!((a - b).abs() < 0.051);
        }

        let mask: Vec<bool> = (0..15).map(|i| i % 3 == 0).collect();
        let p = dir.path().join("mask.png");
        save_mask_png(&p, &mask, 5, 3).unwrap();
        assert_eq!(load_mask_png(&p).unwrap().0, mask);
    }

    #[test]
    fn tensor_layout_is_planar() {
        let mut img = RgbImage::new(2, 1);
        img.set_pixel(1, 0, [1.0, 0.5, 0.0]);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.values(), &[-1.0, 1.0, -1.0, 0.0, -1.0, -1.0]);
    }
}
