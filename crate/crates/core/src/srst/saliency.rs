//! Spectral-residual saliency. The sonar branch sees grayscale saliency maps
//! rather than color, which removes chromatic cues the real sensor never has.

use image::{imageops, ImageBuffer, Luma};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::imaging::ImageF32;

type GrayF32 = ImageBuffer<Luma<f32>, Vec<f32>>;

/// Anything that turns a gray plane into a same-sized saliency plane in
/// `[0, 255]`.
pub trait Saliency: Send + Sync {
    fn plane(&self, gray: &[f32], width: usize, height: usize) -> Vec<f32>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralResidual {
    /// Longer side of the working resolution.
    pub work_size: usize,
    /// Gaussian smoothing in working-resolution pixels.
    pub sigma: f32,
}

impl Default for SpectralResidual {
    fn default() -> Self {
        Self {
            work_size: 64,
            sigma: 2.5,
        }
    }
}

/// Grayscale saliency of `img` with the default backend, replicated to three
/// channels.
pub fn to_saliency(img: &ImageF32) -> ImageF32 {
    to_saliency_with(&SpectralResidual::default(), img)
}

pub fn to_saliency_with(backend: &dyn Saliency, img: &ImageF32) -> ImageF32 {
    let plane = backend.plane(&img.to_gray(), img.width, img.height);
    ImageF32::from_gray(img.width, img.height, &plane)
}

fn is_flat(v: &[f32]) -> bool {
    let (lo, hi) = min_max(v);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    hi - lo <= 1e-6 * scale
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn unit_range(v: &[f32]) -> Vec<f32> {
    let (lo, hi) = min_max(v);
    let k = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    v.iter().map(|&x| (x - lo) * k).collect()
}

impl Saliency for SpectralResidual {
    fn plane(&self, gray: &[f32], width: usize, height: usize) -> Vec<f32> {
        assert_eq!(gray.len(), width * height);
        assert!(width > 0 && height > 0, "empty image");
        if is_flat(gray) {
            return vec![0.0; gray.len()];
        }
        let long = width.max(height);
        let ws = self.work_size.min(long).max(1);
        let ww = ((width * ws) as f64 / long as f64).round().max(1.0) as usize;
        let wh = ((height * ws) as f64 / long as f64).round().max(1.0) as usize;
        // the image crate clamps float pixels to [0, 1]; the residual is
        // invariant to affine intensity changes, so rescaling loses nothing
        let src = GrayF32::from_raw(width as u32, height as u32, unit_range(gray)).expect("size");
        let small = if (ww, wh) == (width, height) {
            src
        } else {
            imageops::resize(&src, ww as u32, wh as u32, imageops::FilterType::Triangle)
        };

        let energy = residual_energy(small.as_raw(), ww, wh);
        let energy = GrayF32::from_raw(ww as u32, wh as u32, unit_range(&energy)).expect("size");
        let smooth = imageops::blur(&energy, self.sigma);
        let full = if (ww, wh) == (width, height) {
            smooth
        } else {
            imageops::resize(&smooth, width as u32, height as u32, imageops::FilterType::Triangle)
        };
        let mut out = full.into_raw();
        let (lo, hi) = min_max(&out);
        if !(hi > lo) || !hi.is_finite() {
            return vec![0.0; out.len()];
        }
        let k = 255.0 / (hi - lo);
        for v in &mut out {
            *v = ((*v - lo) * k).clamp(0.0, 255.0);
        }
        out
    }
}

/// Squared magnitude of the inverse transform of `exp(residual + i*phase)`.
fn residual_energy(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
    let mut spec: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut spec, w, h, false);

    // a floor relative to the peak keeps exact spectral zeros (common on
    // synthetic flat-colored shapes) from dominating the residual
    let floor = 1e-3 * spec.iter().map(|c| c.norm()).fold(0.0, f64::max) + 1e-300;
    let mut log_amp: Vec<f64> = spec.iter().map(|c| (c.norm() + floor).ln()).collect();
    // the mean was removed, so the DC bin carries no information
    log_amp[0] = neighbours(&log_amp, w, h, 0, 0).iter().sum::<f64>() / 8.0;
    let mut out = vec![Complex::new(0.0, 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let local = (neighbours(&log_amp, w, h, x, y).iter().sum::<f64>() + log_amp[i]) / 9.0;
            let r = log_amp[i] - local;
            out[i] = Complex::from_polar(r.exp(), spec[i].arg());
        }
    }
    out[0] = Complex::new(0.0, 0.0);
    fft2(&mut planner, &mut out, w, h, true);
    out.iter().map(|c| c.norm_sqr() as f32).collect()
}

fn neighbours(v: &[f64], w: usize, h: usize, x: usize, y: usize) -> [f64; 8] {
    let mut n = [0.0; 8];
    let mut k = 0;
    for dy in [h - 1, 0, 1] {
        for dx in [w - 1, 0, 1] {
            if dx == 0 && dy == 0 {
                continue;
            }
            n[k] = v[((y + dy) % h) * w + (x + dx) % w];
            k += 1;
        }
    }
    n
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
    if inverse {
        let s = 1.0 / (w * h) as f64;
        data.iter_mut().for_each(|c| *c *= s);
    }
}
