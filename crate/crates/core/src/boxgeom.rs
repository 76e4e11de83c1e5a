//! Box algebra shared by the losses, the heads, the tracker crops and the
//! evaluation metrics.
//!
//! Boxes are stored top-left `(x, y, w, h)` in pixels, which is the layout of
//! every annotation file this crate reads. Corner form is only used
//! internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Template crops use 2x the box scale, search crops 4x.
pub const TEMPLATE_CONTEXT: f64 = 2.0;
pub const SEARCH_CONTEXT: f64 = 4.0;

/// Axis-aligned box in pixels. The all-zero box means "target absent".
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const ABSENT: BBox = BBox {
        x: 0.0,
        y: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, (x2 - x1).max(0.0), (y2 - y1).max(0.0))
    }

    pub fn is_absent(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.w == 0.0 && self.h == 0.0
    }

    /// Rejects negative or non-finite extents.
    pub fn validate(&self) -> Result<()> {
        let finite = self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w < 0.0 || self.h < 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.w * k, self.h * k)
    }

    /// Intersects the box with `[x0, x1] x [y0, y1]`.
    pub fn clamp_to(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let ax = self.x.clamp(x0, x1);
        let ay = self.y.clamp(y0, y1);
        let bx = self.x2().clamp(x0, x1);
        let by = self.y2().clamp(y0, y1);
        Self::from_corners(ax, ay, bx, by)
    }

    pub fn clamp_to_image(&self, width: f64, height: f64) -> Self {
        self.clamp_to(0.0, 0.0, width, height)
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    iw * ih
}

/// Area measured from the corners, consistent with [`intersection`] so that
/// identical boxes overlap exactly 1.
fn corner_area(b: &BBox) -> f64 {
    (b.x2() - b.x) * (b.y2() - b.y)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Generalized IoU. A zero-area enclosing box returns 0.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let overlap = iou(a, b)?;
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    let ew = a.x2().max(b.x2()) - a.x.min(b.x);
    let eh = a.y2().max(b.y2()) - a.y.min(b.y);
    let enclosing = ew * eh;
    if enclosing <= 0.0 {
        return Ok(0.0);
    }
    Ok(overlap - (enclosing - union) / enclosing)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok((ax - bx).hypot(ay - by))
}

/// Center offset measured in units of the ground-truth width and height.
pub fn normalized_center_distance(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::InvalidBox(format!("degenerate ground truth {gt:?}")));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dx = (px - gx) / gt.w;
    let dy = (py - gy) / gt.h;
    Ok((dx * dx + dy * dy).sqrt())
}

/// Square crop region around a box, resampled to `out_size` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    pub fn new(cx: f64, cy: f64, side: f64, out_size: usize) -> Result<Self> {
        if !(side > 0.0) || out_size == 0 {
            return Err(Error::InvalidBox(format!(
                "crop window side {side} / out_size {out_size} must be positive"
            )));
        }
        Ok(Self {
            cx,
            cy,
            side,
            out_size,
        })
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// Output pixels per image pixel.
    pub fn resize_factor(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    /// Image-space box -> box in `[0, 1]` crop-normalized units.
    pub fn to_normalized(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.x0()) / self.side,
            (b.y - self.y0()) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    /// Inverse of [`CropWindow::to_normalized`].
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0() + b.x * self.side,
            self.y0() + b.y * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// The square the window covers, in image pixels.
    pub fn extent(&self) -> BBox {
        BBox::new(self.x0(), self.y0(), self.side, self.side)
    }
}

/// Square window centered on `b` with side `context_factor * sqrt(w * h)`,
/// never smaller than one pixel.
pub fn crop_window(b: &BBox, context_factor: f64, out_size: usize) -> Result<CropWindow> {
    b.validate()?;
    if b.is_absent() {
        return Err(Error::InvalidBox(
            "cannot crop around an absent box; substitute the last known box".into(),
        ));
    }
    if !(context_factor > 0.0) {
        return Err(Error::InvalidBox(format!(
            "context factor {context_factor} must be positive"
        )));
    }
    let (cx, cy) = b.center();
    let side = (context_factor * (b.w * b.h).sqrt()).max(1.0);
    CropWindow::new(cx, cy, side, out_size)
}
