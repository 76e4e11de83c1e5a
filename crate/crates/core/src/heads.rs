//! Fully convolutional center heads and box decoding.
//!
//! Each modality has its own head: a classification map, a sub-cell offset
//! map and a normalized size map over the search feature grid.
//!
//! Grid convention: cell `(i, j)` covers crop-normalized coordinates
//! `[j/side, (j+1)/side)` horizontally. A predicted center is
//! `(j + 0.5 + offset_x) / side`, so a zero offset lands on the cell center
//! and [`encode_center`] is its exact inverse.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::boxgeom::{BBox, CropWindow};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, to_f64_vec, Conv2d, Init};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Conv stages per map branch; each halves the channel count.
    pub stages: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { stages: 4 }
    }
}

/// Batched head outputs, each `(B, k, side, side)`.
#[derive(Debug, Clone)]
pub struct ScoreMapBundle {
    pub cls: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl ScoreMapBundle {
    pub fn side(&self) -> Result<usize> {
        Ok(self.cls.dim(3)?)
    }

    /// Copies batch element `b` to host memory.
    pub fn maps(&self, b: usize) -> Result<ScoreMaps> {
        let side = self.side()?;
        let plane = side * side;
        let cls = to_f64_vec(&self.cls.get(b)?)?;
        let off = to_f64_vec(&self.offset.get(b)?)?;
        let size = to_f64_vec(&self.size.get(b)?)?;
        Ok(ScoreMaps {
            side,
            cls,
            offset: [off[..plane].to_vec(), off[plane..].to_vec()],
            size: [size[..plane].to_vec(), size[plane..].to_vec()],
        })
    }
}

/// One example's maps in row-major order; `offset[0]`/`size[0]` are the x/width channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub side: usize,
    pub cls: Vec<f64>,
    pub offset: [Vec<f64>; 2],
    pub size: [Vec<f64>; 2],
}

impl ScoreMaps {
    pub fn uniform(side: usize, cls: f64, size: f64) -> Self {
        let n = side * side;
        Self {
            side,
            cls: vec![cls; n],
            offset: [vec![0.0; n], vec![0.0; n]],
            size: [vec![size; n], vec![size; n]],
        }
    }

    pub fn peak_value(&self) -> f64 {
        self.cls.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
struct MapBranch {
    stages: Vec<Conv2d>,
    out: Conv2d,
}

impl MapBranch {
    fn new(init: &mut Init, dim: usize, stages: usize, out_ch: usize) -> Result<Self> {
        let mut ch = dim;
        let mut convs = Vec::with_capacity(stages);
        for i in 0..stages {
            let next = (ch / 2).max(1);
            convs.push(Conv2d::new(&mut init.pp(format!("conv{i}")), ch, next, 3, 1, 1)?);
            ch = next;
        }
        let out = Conv2d::new(&mut init.pp("out"), ch, out_ch, 1, 1, 0)?;
        Ok(Self { stages: convs, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.stages {
            h = conv.forward(&h)?.relu()?;
        }
        sigmoid(&self.out.forward(&h)?)
    }
}

#[derive(Debug, Clone)]
pub struct CenterHead {
    cls: MapBranch,
    offset: MapBranch,
    size: MapBranch,
    dim: usize,
}

impl CenterHead {
    pub fn new(init: &mut Init, dim: usize, cfg: &HeadConfig) -> Result<Self> {
        Ok(Self {
            cls: MapBranch::new(&mut init.pp("cls"), dim, cfg.stages, 1)?,
            offset: MapBranch::new(&mut init.pp("offset"), dim, cfg.stages, 2)?,
            size: MapBranch::new(&mut init.pp("size"), dim, cfg.stages, 2)?,
            dim,
        })
    }

    /// `(B, n_x, C)` search tokens -> maps over the `sqrt(n_x)` square grid.
    pub fn forward(&self, search_tokens: &Tensor) -> Result<ScoreMapBundle> {
        let (b, n, c) = search_tokens.dims3()?;
        if c != self.dim {
            return Err(Error::shape(format!("head width {} vs tokens {c}", self.dim)));
        }
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::shape(format!("{n} search tokens do not form a square grid")));
        }
        let feat = search_tokens.transpose(1, 2)?.reshape((b, c, side, side))?;
        Ok(ScoreMapBundle {
            cls: self.cls.forward(&feat)?,
            offset: self.offset.forward(&feat)?,
            size: self.size.forward(&feat)?,
        })
    }
}

/// The two per-modality heads, built from one generator state so they start
/// identical but never share parameters.
#[derive(Debug, Clone)]
pub struct DualHeads {
    pub rgb: CenterHead,
    pub sonar: CenterHead,
}

impl DualHeads {
    pub fn new(init: &mut Init, bb: &BackboneConfig, cfg: &HeadConfig) -> Result<Self> {
        let start: ChaCha8Rng = init.rng().clone();
        let rgb = CenterHead::new(&mut init.pp("head_rgb"), bb.dim, cfg)?;
        let after = init.rng().clone();
        *init.rng() = start;
        let sonar = CenterHead::new(&mut init.pp("head_sonar"), bb.dim, cfg)?;
        *init.rng() = after;
        Ok(Self { rgb, sonar })
    }
}

/// Separable Hann window over the grid with non-zero borders.
pub fn hann_window(side: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..side)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (k + 1) as f64 / (side + 1) as f64).cos())
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for wy in &w {
        for wx in &w {
            out.push(wy * wx);
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest row-major index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Peak cell and sub-cell offset for a crop-normalized center coordinate.
pub fn encode_center(c: f64, side: usize) -> (usize, f64) {
    let u = c * side as f64 - 0.5;
    let idx = u.floor().clamp(0.0, (side - 1) as f64);
    let off = (u - idx).clamp(0.0, 1.0 - f64::EPSILON);
    (idx as usize, off)
}

pub fn decode_center(idx: usize, offset: f64, side: usize) -> f64 {
    (idx as f64 + 0.5 + offset) / side as f64
}

/// Decodes one modality's maps into an image-space box and confidence.
///
/// The peak of the (optionally Hann-penalized) classification map selects
/// the cell; the confidence is the raw maximum of the map, so the penalty
/// only moves the peak. An all-zero map yields confidence 0 and a box at the
/// window center. The box is clipped to the window's extent.
pub fn decode_box(maps: &ScoreMaps, window: &CropWindow, hann_weight: Option<f64>) -> (BBox, f64) {
    let side = maps.side;
    let confidence = maps.peak_value();
    let idx = if confidence <= 0.0 {
        (side / 2) * side + side / 2
    } else {
        match hann_weight {
            Some(w) if w > 0.0 => {
                let hann = hann_window(side);
                let penalized: Vec<f64> = maps
                    .cls
                    .iter()
                    .zip(&hann)
                    .map(|(c, h)| c * ((1.0 - w) + w * h))
                    .collect();
                argmax_first(&penalized)
            }
            _ => argmax_first(&maps.cls),
        }
    };
    let (i, j) = (idx / side, idx % side);
    let (cx, cy) = if confidence <= 0.0 {
        (0.5, 0.5)
    } else {
        (
            decode_center(j, maps.offset[0][idx], side),
            decode_center(i, maps.offset[1][idx], side),
        )
    };
    let norm = BBox::from_center(cx, cy, maps.size[0][idx], maps.size[1][idx]);
    let ext = window.extent();
    let b = window
        .to_image(&norm)
        .clamp_to(ext.x, ext.y, ext.x2(), ext.y2());
    (b, confidence)
}
