//! Float image buffers, bilinear crop-and-resize, and conversion to network
//! input tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::boxgeom::CropWindow;
use crate::error::{Error, Result};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Interleaved RGB image with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Single-channel plane replicated into all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[f32]) -> Self {
        assert_eq!(gray.len(), width * height);
        let mut data = Vec::with_capacity(gray.len() * 3);
        for &g in gray {
            data.extend_from_slice(&[g, g, g]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma plane (BT.601 weights).
    pub fn to_gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn is_achromatic(&self) -> bool {
        self.data.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2])
    }

    /// Crops `window` out of the image and resamples it to
    /// `out_size x out_size` with bilinear interpolation. Output pixels whose
    /// source falls outside the image take the per-channel mean of the
    /// in-image part of the window.
    pub fn crop_resize(&self, window: &CropWindow) -> ImageF32 {
        let n = window.out_size;
        let mut out = ImageF32::new(n, n);
        let scale = window.side / n as f64;
        let (x0, y0) = (window.x0(), window.y0());
        let pad = self.window_mean(window);
        let (w, h) = (self.width as f64, self.height as f64);
        for oy in 0..n {
            let sy = y0 + (oy as f64 + 0.5) * scale;
            for ox in 0..n {
                let sx = x0 + (ox as f64 + 0.5) * scale;
                let rgb = if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
                    pad
                } else {
                    self.sample_bilinear(sx - 0.5, sy - 0.5)
                };
                out.set(ox, oy, rgb);
            }
        }
        out
    }

    fn sample_bilinear(&self, fx: f64, fy: f64) -> [f32; 3] {
        let max_x = self.width as f64 - 1.0;
        let max_y = self.height as f64 - 1.0;
        let fx = fx.clamp(0.0, max_x);
        let fy = fy.clamp(0.0, max_y);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let top = self.get(x0, y0, c) * (1.0 - ax) + self.get(x1, y0, c) * ax;
            let bot = self.get(x0, y1, c) * (1.0 - ax) + self.get(x1, y1, c) * ax;
            *v = top * (1.0 - ay) + bot * ay;
        }
        rgb
    }

    /// Per-channel mean over the pixels the window covers inside the image;
    /// falls back to the whole-image mean when they do not overlap.
    fn window_mean(&self, window: &CropWindow) -> [f32; 3] {
        let xa = window.x0().floor().max(0.0) as usize;
        let ya = window.y0().floor().max(0.0) as usize;
        let xb = ((window.x0() + window.side).ceil().max(0.0) as usize).min(self.width);
        let yb = ((window.y0() + window.side).ceil().max(0.0) as usize).min(self.height);
        let (xa, ya, xb, yb) = if xa < xb && ya < yb {
            (xa, ya, xb, yb)
        } else {
            (0, 0, self.width, self.height)
        };
        let mut acc = [0.0f64; 3];
        for y in ya..yb {
            for x in xa..xb {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += self.get(x, y, c) as f64;
                }
            }
        }
        let count = ((xb - xa) * (yb - ya)).max(1) as f64;
        acc.map(|a| (a / count) as f32)
    }

    /// Normalized `(3, H, W)` CHW values, ImageNet statistics.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (px[c] / 255.0 - MEAN[c]) / STD[c];
            }
        }
        out
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.to_chw(), (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Stacks same-sized images into a `(B, 3, H, W)` tensor.
pub fn batch_tensor(images: &[&ImageF32], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("empty image batch"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::shape(format!(
                "batch images differ in size: {}x{} vs {w}x{h}",
                img.width, img.height
            )));
        }
        data.extend(img.to_chw());
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Draws a one-pixel outline of `b`, clipped to the image.
pub fn draw_box(img: &mut ImageF32, b: &crate::boxgeom::BBox, rgb: [f32; 3]) {
    if b.is_absent() || img.width == 0 || img.height == 0 {
        return;
    }
    let clampx = |v: f64| (v.round().max(0.0) as usize).min(img.width - 1);
    let clampy = |v: f64| (v.round().max(0.0) as usize).min(img.height - 1);
    let (x0, x1) = (clampx(b.x), clampx(b.x2() - 1.0));
    let (y0, y1) = (clampy(b.y), clampy(b.y2() - 1.0));
    for x in x0..=x1 {
        img.set(x, y0, rgb);
        img.set(x, y1, rgb);
    }
    for y in y0..=y1 {
        img.set(x0, y, rgb);
        img.set(x1, y, rgb);
    }
}

/// Pastes images into a grid, row-major, for previews.
pub fn tile(images: &[ImageF32], columns: usize, gap: usize) -> ImageF32 {
    let cell_w = images.iter().map(|i| i.width).max().unwrap_or(1);
    let cell_h = images.iter().map(|i| i.height).max().unwrap_or(1);
    let columns = columns.max(1);
    let rows = images.len().div_ceil(columns).max(1);
    let mut out = ImageF32::filled(
        columns * (cell_w + gap) + gap,
        rows * (cell_h + gap) + gap,
        [255.0, 255.0, 255.0],
    );
    for (k, img) in images.iter().enumerate() {
        let ox = gap + (k % columns) * (cell_w + gap);
        let oy = gap + (k / columns) * (cell_h + gap);
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(ox + x, oy + y, [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]);
            }
        }
    }
    out
}
