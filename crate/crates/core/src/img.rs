//! RGB image buffer shared by the synthesizer, metrics, and restoration paths.
//!
//! Pixels are `f32` in `[0, 1]`, interleaved RGB, row-major. Model code
//! converts to/from channels-last tensors of shape `[H, W, 3]`.

use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self { h, w, data: vec![value; h * w * 3] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::shape(format!(
                "image buffer length {} does not match {h}x{w}x3",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.w + x) * 3 + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel luma, `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.h, self.w, 3), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Expects a `[H, W, 3]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match &img {
            image::DynamicImage::ImageRgb16(_)
            | image::DynamicImage::ImageRgba16(_)
            | image::DynamicImage::ImageLuma16(_)
            | image::DynamicImage::ImageLumaA16(_) => {
                img.to_rgb16().as_raw().iter().map(|&v| v as f32 / 65535.0).collect()
            }
            _ => img.to_rgb8().as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        };
        Self::from_vec(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.w as u32, self.h as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            for c in 0..3 {
                let v = self.data[i * 3 + c].clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        out.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// 16-bit PNG. A half-step encode error of 0.5/65535 is far below half a
    /// storage-grid spacing (1/512), so grid values survive a save/load cycle
    /// exactly once re-quantized.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let mut out =
            image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(self.w as u32, self.h as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            for c in 0..3 {
                let v = self.data[i * 3 + c].clamp(0.0, 1.0);
                px.0[c] = (v * 65535.0).round() as u16;
            }
        }
        out.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, self.w - 1 - x, c));
                }
            }
        }
        out
    }

    /// Rotates by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rot90(&self, quarter_turns: usize) -> Self {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => {
                let mut out = Self::new(self.w, self.h);
                for y in 0..self.h {
                    for x in 0..self.w {
                        for c in 0..3 {
                            out.set(self.w - 1 - x, y, c, self.get(y, x, c));
                        }
                    }
                }
                out
            }
            2 => {
                let mut out = Self::new(self.h, self.w);
                for y in 0..self.h {
                    for x in 0..self.w {
                        for c in 0..3 {
                            out.set(self.h - 1 - y, self.w - 1 - x, c, self.get(y, x, c));
                        }
                    }
                }
                out
            }
            _ => {
                let mut out = Self::new(self.w, self.h);
                for y in 0..self.h {
                    for x in 0..self.w {
                        for c in 0..3 {
                            out.set(x, self.h - 1 - y, c, self.get(y, x, c));
                        }
                    }
                }
                out
            }
        }
    }

    /// Reflection-pads to `(h + bottom, w + right)`. Used to make restore
    /// inputs divisible by the denoiser's downsampling factor.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Self> {
        if bottom >= self.h || right >= self.w {
            return Err(Error::shape(format!(
                "reflection pad ({bottom}, {right}) too large for {}x{} image",
                self.h, self.w
            )));
        }
        let (nh, nw) = (self.h + bottom, self.w + right);
        let mut out = Self::new(nh, nw);
        for y in 0..nh {
            let sy = if y < self.h { y } else { 2 * self.h - 2 - y };
            for x in 0..nw {
                let sx = if x < self.w { x } else { 2 * self.w - 2 - x };
                for c in 0..3 {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        Ok(out)
    }

    pub fn crop(&self, h: usize, w: usize) -> Self {
        let mut out = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, x, c));
                }
            }
        }
        out
    }
}

/// Stacks images into a `[B, H, W, 3]` batch tensor.
pub fn batch_tensor(images: &[&ImageBuf], dtype: DType, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::shape("empty image batch"));
    }
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.h != h || img.w != w {
            return Err(Error::shape("images in a batch must share dimensions"));
        }
        data.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, 3), device)?;
    Ok(t.to_dtype(dtype)?)
}
