//! Planar images with values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{param_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel-major (CHW) image; one or three channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return param_err(
                "image",
                format!("{}x{}x{} needs {} values, got {}", channels, height, width, channels * height * width, data.len()),
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        if self.channels == 1 {
            let v = self.get(0, y, x);
            [v, v, v]
        } else {
            [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
        }
    }

    /// True if any channel of the pixel is nonzero.
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        (0..self.channels).any(|c| self.get(c, y, x) != 0.0)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return param_err(
                "crop",
                format!("window {width}x{height}+{x0}+{y0} exceeds {}x{}", self.width, self.height),
            );
        }
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = ((c * self.height + y0 + y) * self.width) + x0;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }

    /// Map `[0, 1]` to `[-1, 1]` as a `[C, H, W]` tensor.
    pub fn to_signed_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64_lossy(v as f64 * 2.0 - 1.0)).collect();
        Tensor::new(vec![self.channels, self.height, self.width], data).expect("consistent image")
    }

    /// Inverse of [`Image::to_signed_tensor`] for a `[C, H, W]` or `[1, C, H, W]` tensor.
    pub fn from_signed_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return param_err("image", format!("expected [C, H, W], got {s:?}")),
        };
        let data = t
            .data()
            .iter()
            .map(|v| ((v.as_f64() + 1.0) * 0.5).clamp(0.0, 1.0) as f32)
            .collect();
        Self::from_data(c, h, w, data)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut buf = Cursor::new(Vec::new());
        match self.channels {
            1 => {
                let img: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                        Luma([q(self.get(0, y as usize, x as usize))])
                    });
                img.write_to(&mut buf, ImageFormat::Png)?;
            }
            3 => {
                let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                        let p = self.pixel(y as usize, x as usize);
                        Rgb([q(p[0]), q(p[1]), q(p[2])])
                    });
                img.write_to(&mut buf, ImageFormat::Png)?;
            }
            n => return param_err("image", format!("PNG export supports 1 or 3 channels, got {n}")),
        }
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    /// Load any PNG as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(Error::Image)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}
