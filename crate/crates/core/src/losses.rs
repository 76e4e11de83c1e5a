//! Training objective: per-modality focal loss on the classification map
//! plus GIoU and L1 box regression, combined with fixed weights
//!
//! ```text
//! L = cls_r + cls_s + lambda_iou (giou_r + giou_s) + lambda_l1 (l1_r + l1_s)
//! ```
//!
//! A modality whose ground truth is absent contributes classification only.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{giou, BBox};
use crate::error::{Error, Result};
use crate::heads::{decode_center, encode_center, ScoreMapBundle};

/// Predictions are clipped to `[CLIP_EPS, 1 - CLIP_EPS]` before logs.
pub const CLIP_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_iou > 0.0 && self.lambda_l1 > 0.0) {
            return Err(Error::config("loss weights must be strictly positive"));
        }
        Ok(())
    }
}

/// One modality's loss components; regression terms are `None` when the
/// target is absent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub giou: Option<f64>,
    pub l1: Option<f64>,
}

pub fn total_loss(rgb: &LossTerms, sonar: &LossTerms, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("cls_rgb", Some(rgb.cls)),
        ("cls_sonar", Some(sonar.cls)),
        ("giou_rgb", rgb.giou),
        ("giou_sonar", sonar.giou),
        ("l1_rgb", rgb.l1),
        ("l1_sonar", sonar.l1),
    ];
    for (name, v) in parts {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} loss is {v}")));
            }
        }
    }
    let opt = |v: Option<f64>| v.unwrap_or(0.0);
    Ok(rgb.cls
        + sonar.cls
        + w.lambda_iou * (opt(rgb.giou) + opt(sonar.giou))
        + w.lambda_l1 * (opt(rgb.l1) + opt(sonar.l1)))
}

/// `(1 - giou, mean |delta|)` for crop-normalized `(x, y, w, h)` boxes.
pub fn box_losses(pred: &BBox, gt: &BBox) -> Result<(f64, f64)> {
    if gt.is_absent() {
        return Err(Error::InvalidBox("absent ground truth has no regression loss".into()));
    }
    let g = giou(pred, gt)?;
    let l1 = ((pred.x - gt.x).abs() + (pred.y - gt.y).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs()) / 4.0;
    Ok((1.0 - g, l1))
}

/// Penalty-reduced pixelwise focal loss (alpha 2, beta 4), normalized by the
/// number of cells whose target is exactly 1 (or by 1 if there are none).
pub fn focal_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "focal loss shapes {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let p = pred.clamp(CLIP_EPS, 1.0 - CLIP_EPS)?;
    let pos = target.ge(1.0)?.to_dtype(p.dtype())?;
    let neg = (1.0 - &pos)?;
    let one_minus_p = (1.0 - &p)?;
    let pos_term = (p.log()? * one_minus_p.sqr()?)?.mul(&pos)?;
    let neg_weight = (1.0 - target)?.powf(4.0)?;
    let neg_term = ((one_minus_p.log()? * p.sqr()?)? * neg_weight)?.mul(&neg)?;
    let num_pos = pos.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((pos_term.sum_all()? + neg_term.sum_all()?)?.neg()? / num_pos)?)
}

/// Differentiable `(1 - giou, l1)` over rows of `(N, 4)` xywh boxes,
/// averaged over rows.
pub fn box_losses_tensor(pred: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, four) = pred.dims2()?;
    if four != 4 || gt.dims() != pred.dims() {
        return Err(Error::shape(format!(
            "box tensors {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (px, py, pw, ph) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx, gy, gw, gh) = (col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?);
    let px2 = (&px + &pw)?;
    let py2 = (&py + &ph)?;
    let gx2 = (&gx + &gw)?;
    let gy2 = (&gy + &gh)?;
    let iw = (px2.minimum(&gx2)? - px.maximum(&gx)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py.maximum(&gy)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((pw.mul(&ph)? + gw.mul(&gh)?)? - &inter)?.maximum(1e-12)?;
    let ew = (px2.maximum(&gx2)? - px.minimum(&gx)?)?;
    let eh = (py2.maximum(&gy2)? - py.minimum(&gy)?)?;
    let enclosing = (ew * eh)?.maximum(1e-12)?;
    let iou = (&inter / &union)?;
    let g = (iou - ((&enclosing - &union)? / &enclosing)?)?;
    let giou_loss = (1.0 - g)?.mean_all()?;
    let l1 = (pred - gt)?.abs()?.sum_all()?;
    let l1 = (l1 / (4 * n) as f64)?;
    Ok((giou_loss, l1))
}

/// CenterNet radius for a box of `h x w` cells at minimum overlap 0.7.
pub fn gaussian_radius(h: f64, w: f64) -> f64 {
    let min_overlap = 0.7;
    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Per-example regression target on the feature grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterTarget {
    pub row: usize,
    pub col: usize,
    /// Crop-normalized ground truth, `(x, y, w, h)`.
    pub gt: BBox,
}

impl CenterTarget {
    pub fn new(gt_norm: &BBox, side: usize) -> Option<Self> {
        if gt_norm.is_absent() {
            return None;
        }
        let (cx, cy) = gt_norm.center();
        let (col, _) = encode_center(cx, side);
        let (row, _) = encode_center(cy, side);
        Some(Self {
            row,
            col,
            gt: *gt_norm,
        })
    }

    pub fn index(&self, side: usize) -> usize {
        self.row * side + self.col
    }
}

/// Gaussian heatmap peaking at exactly 1 on the target cell; all zeros when
/// the target is absent.
pub fn gaussian_heatmap(target: Option<&CenterTarget>, side: usize) -> Vec<f64> {
    let mut heat = vec![0.0; side * side];
    let Some(t) = target else {
        return heat;
    };
    let gw = t.gt.w * side as f64;
    let gh = t.gt.h * side as f64;
    let radius = gaussian_radius(gh, gw).floor().max(0.0);
    let sigma = (2.0 * radius + 1.0) / 6.0;
    for i in 0..side {
        for j in 0..side {
            let di = i as f64 - t.row as f64;
            let dj = j as f64 - t.col as f64;
            heat[i * side + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    heat[t.index(side)] = 1.0;
    heat
}

/// Batched loss for one modality. `targets[b] = None` marks an absent
/// target: its heatmap is all zero and it is left out of regression.
pub fn modality_loss(
    bundle: &ScoreMapBundle,
    targets: &[Option<CenterTarget>],
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let side = bundle.side()?;
    let batch = bundle.cls.dim(0)?;
    if targets.len() != batch {
        return Err(Error::shape(format!("{} targets for batch {batch}", targets.len())));
    }
    let dev = bundle.cls.device();
    let dtype = bundle.cls.dtype();
    let heat: Vec<f64> = targets
        .iter()
        .flat_map(|t| gaussian_heatmap(t.as_ref(), side))
        .collect();
    let heat = Tensor::from_vec(heat, (batch, 1, side, side), dev)?.to_dtype(dtype)?;
    let cls = focal_loss(&bundle.cls, &heat)?;

    let present: Vec<(usize, CenterTarget)> = targets
        .iter()
        .enumerate()
        .filter_map(|(b, t)| t.map(|t| (b, t)))
        .collect();
    if present.is_empty() {
        return Ok((cls, None));
    }
    let pred = predicted_boxes(bundle, &present, side, dev)?;
    let gt: Vec<f64> = present
        .iter()
        .flat_map(|(_, t)| [t.gt.x, t.gt.y, t.gt.w, t.gt.h])
        .collect();
    let gt = Tensor::from_vec(gt, (present.len(), 4), dev)?.to_dtype(dtype)?;
    let (g, l1) = box_losses_tensor(&pred, &gt)?;
    Ok((cls, Some((g, l1))))
}

/// Boxes read off the offset/size maps at each target's peak cell, as a
/// differentiable `(N, 4)` xywh tensor.
fn predicted_boxes(
    bundle: &ScoreMapBundle,
    present: &[(usize, CenterTarget)],
    side: usize,
    dev: &Device,
) -> Result<Tensor> {
    let plane = side * side;
    let batch_idx: Vec<u32> = present.iter().map(|(b, _)| *b as u32).collect();
    let batch_idx = Tensor::from_vec(batch_idx, present.len(), dev)?;
    let cell: Vec<u32> = present
        .iter()
        .flat_map(|(_, t)| [t.index(side) as u32; 2])
        .collect();
    let cell = Tensor::from_vec(cell, (present.len(), 2, 1), dev)?;
    let pick = |maps: &Tensor| -> Result<Tensor> {
        let flat = maps.reshape((maps.dim(0)?, 2, plane))?.index_select(&batch_idx, 0)?;
        Ok(flat.gather(&cell, 2)?.squeeze(2)?)
    };
    let off = pick(&bundle.offset)?;
    let size = pick(&bundle.size)?;
    let base: Vec<f64> = present
        .iter()
        .flat_map(|(_, t)| [decode_center(t.col, 0.0, side), decode_center(t.row, 0.0, side)])
        .collect();
    let base = Tensor::from_vec(base, (present.len(), 2), dev)?.to_dtype(off.dtype())?;
    let center = (base + (off / side as f64)?)?;
    let top_left = (center - (&size / 2.0)?)?;
    Ok(Tensor::cat(&[top_left, size], 1)?)
}
