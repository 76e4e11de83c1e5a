//! Online tracking of one target in both modalities with the confidence
//! gate: a peak response below the threshold reports `[0,0,0,0]`.
//!
//! Each modality keeps an anchor, the last box it reported with enough
//! confidence. The next search region is centered on the anchor, so during
//! an absence the tracker keeps looking where the target was last seen.

use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenSeq;
use crate::boxgeom::{crop_window, BBox, CropWindow};
use crate::error::{Error, Result};
use crate::evalkit::{FramePair, Modality, PairTracker, Prediction};
use crate::heads::{decode_box, ScoreMaps};
use crate::imaging::{batch_tensor, ImageF32};
use crate::model::Model;
use crate::srst::data::{FrameCache, FrameRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Peak responses strictly below this report absence.
    pub threshold: f64,
    /// Weight of the cosine-window penalty used to pick the peak; 0 disables.
    pub hann_weight: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Start a modality whose first-frame box is absent once both branches
    /// are confident on a full-frame scan.
    pub lazy_init: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            hann_weight: 0.49,
            template_factor: crate::boxgeom::TEMPLATE_CONTEXT,
            search_factor: crate::boxgeom::SEARCH_CONTEXT,
            lazy_init: false,
        }
    }
}

/// The absence rule shared by every tracker.
pub fn gate(bbox: BBox, confidence: f64, threshold: f64) -> Prediction {
    if confidence < threshold {
        Prediction {
            bbox: BBox::ABSENT,
            confidence,
        }
    } else {
        Prediction { bbox, confidence }
    }
}

#[derive(Debug, Clone)]
pub struct BranchState {
    /// Embedded template tokens, fixed after initialization.
    pub template: Option<Tensor>,
    pub last_box: BBox,
    pub last_confidence: f64,
    /// Last confidently reported box; `None` until initialized.
    pub anchor: Option<BBox>,
}

impl BranchState {
    fn empty() -> Self {
        Self {
            template: None,
            last_box: BBox::ABSENT,
            last_confidence: 0.0,
            anchor: None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.template.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub rgb: BranchState,
    pub sonar: BranchState,
}

impl TrackerState {
    pub fn branch(&self, m: Modality) -> &BranchState {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Sonar => &self.sonar,
        }
    }

    fn branch_mut(&mut self, m: Modality) -> &mut BranchState {
        match m {
            Modality::Rgb => &mut self.rgb,
            Modality::Sonar => &mut self.sonar,
        }
    }
}

/// Replaces decoded score maps before decoding; used to script responses.
pub type ScoreOverride = Box<dyn Fn(Modality, usize, &ScoreMaps) -> ScoreMaps + Send + Sync>;

/// The network tracker.
pub struct NetTracker {
    model: Arc<Model>,
    cfg: TrackerConfig,
    state: Option<TrackerState>,
    cache: FrameCache,
    score_override: Option<ScoreOverride>,
}

fn is_rgb(m: Modality) -> bool {
    m == Modality::Rgb
}

/// Window covering the whole frame, for a branch that has no anchor yet.
fn full_frame_window(img: &ImageF32, out_size: usize) -> Result<CropWindow> {
    let side = img.width.max(img.height) as f64;
    CropWindow::new(img.width as f64 / 2.0, img.height as f64 / 2.0, side, out_size)
}

impl NetTracker {
    pub fn new(model: Arc<Model>, cfg: TrackerConfig) -> Self {
        Self {
            model,
            cfg,
            state: None,
            cache: FrameCache::new(false),
            score_override: None,
        }
    }

    pub fn with_score_override(mut self, f: ScoreOverride) -> Self {
        self.score_override = Some(f);
        self
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    fn load(&self, f: &FrameRef) -> Option<Arc<ImageF32>> {
        match self.cache.load(f) {
            Ok(img) => Some(img),
            Err(e) => {
                log::warn!("frame decode failed: {e}");
                None
            }
        }
    }

    fn image_tensor(&self, img: &ImageF32) -> Result<Tensor> {
        batch_tensor(&[img], self.model.dtype(), self.model.device())
    }

    fn embed_template(&self, m: Modality, img: &ImageF32, b: &BBox) -> Result<Tensor> {
        let size = self.model.cfg.backbone.template_size;
        let win = crop_window(b, self.cfg.template_factor, size)?;
        let z = self.image_tensor(&img.crop_resize(&win))?;
        self.model.embed_template(is_rgb(m), &z)
    }

    /// Runs both branches on one frame and returns per-modality decoded
    /// boxes (image space, clipped) and raw confidences, or `None` for a
    /// modality whose frame failed to load.
    fn respond(&self, frame: &FramePair, state: &TrackerState) -> Result<[Option<(BBox, f64)>; 2]> {
        let search = self.model.cfg.backbone.search_size;
        let tsize = self.model.cfg.backbone.template_size;
        let images = [self.load(&frame.rgb), self.load(&frame.sonar)];
        let mut windows = Vec::with_capacity(2);
        let mut crops = Vec::with_capacity(2);
        for (k, m) in Modality::BOTH.into_iter().enumerate() {
            let img = images[k].as_deref();
            let win = match (state.branch(m).anchor, img) {
                (Some(a), _) => crop_window(&a, self.cfg.search_factor, search)?,
                (None, Some(img)) => full_frame_window(img, search)?,
                (None, None) => CropWindow::new(0.0, 0.0, 1.0, search)?,
            };
            crops.push(match img {
                Some(img) => img.crop_resize(&win),
                None => ImageF32::new(search, search),
            });
            windows.push(win);
        }
        let template = |m: Modality| -> Result<Tensor> {
            let own = &state.branch(m).template;
            let other = &state.branch(if is_rgb(m) { Modality::Sonar } else { Modality::Rgb }).template;
            match own.as_ref().or(other.as_ref()) {
                Some(t) => Ok(t.clone()),
                None => {
                    let blank = ImageF32::new(tsize, tsize);
                    self.model.embed_template(is_rgb(m), &self.image_tensor(&blank)?)
                }
            }
        };
        let seq = |m: Modality, crop: &ImageF32| -> Result<TokenSeq> {
            let x = self.model.embed_search(is_rgb(m), &self.image_tensor(crop)?)?;
            TokenSeq::concat(&template(m)?, &x)
        };
        let out = self
            .model
            .forward_tokens(&seq(Modality::Rgb, &crops[0])?, &seq(Modality::Sonar, &crops[1])?)?;
        let bundles = [&out.rgb, &out.sonar];
        let mut res = [None, None];
        for (k, m) in Modality::BOTH.into_iter().enumerate() {
            let Some(img) = images[k].as_deref() else { continue };
            let mut maps = bundles[k].maps(0)?;
            if let Some(f) = &self.score_override {
                maps = f(m, frame.index, &maps);
            }
            let hann = (self.cfg.hann_weight > 0.0).then_some(self.cfg.hann_weight);
            let (b, conf) = decode_box(&maps, &windows[k], hann);
            if !conf.is_finite() {
                return Err(Error::Numeric(format!("non-finite {m} response at frame {}", frame.index)));
            }
            res[k] = Some((b.clamp_to_image(img.width as f64, img.height as f64), conf));
        }
        Ok(res)
    }
}

impl PairTracker for NetTracker {
    fn init(&mut self, frame: &FramePair, boxes: (BBox, BBox)) -> Result<()> {
        if boxes.0.is_absent() && boxes.1.is_absent() {
            return Err(Error::data("cannot initialize: both first-frame boxes are absent"));
        }
        let mut state = TrackerState {
            rgb: BranchState::empty(),
            sonar: BranchState::empty(),
        };
        for (m, b, f) in [(Modality::Rgb, boxes.0, &frame.rgb), (Modality::Sonar, boxes.1, &frame.sonar)] {
            if b.is_absent() {
                continue;
            }
            let img = self.cache.load(f)?;
            let br = state.branch_mut(m);
            br.template = Some(self.embed_template(m, &img, &b)?);
            br.last_box = b;
            br.last_confidence = 1.0;
            br.anchor = Some(b);
        }
        self.state = Some(state);
        Ok(())
    }

    fn track(&mut self, frame: &FramePair) -> Result<(Prediction, Prediction)> {
        let mut state = self
            .state
            .take()
            .ok_or_else(|| Error::config("track called before init"))?;
        let responses = self.respond(frame, &state);
        let responses = match responses {
            Ok(r) => r,
            Err(e) => {
                self.state = Some(state);
                return Err(e);
            }
        };
        let mut preds = [Prediction::ABSENT; 2];
        for (k, m) in Modality::BOTH.into_iter().enumerate() {
            let Some((b, conf)) = responses[k] else { continue };
            if !state.branch(m).is_initialized() {
                let other = responses[1 - k].map_or(0.0, |r| r.1);
                let confident = conf >= self.cfg.threshold && other >= self.cfg.threshold;
                if !(self.cfg.lazy_init && confident && b.w >= 1.0 && b.h >= 1.0) {
                    continue;
                }
                let img = match self.load(if is_rgb(m) { &frame.rgb } else { &frame.sonar }) {
                    Some(i) => i,
                    None => continue,
                };
                state.branch_mut(m).template = Some(self.embed_template(m, &img, &b)?);
                log::debug!("{m} branch initialized at frame {}", frame.index);
            }
            let p = gate(b, conf, self.cfg.threshold);
            let br = state.branch_mut(m);
            br.last_confidence = conf;
            br.last_box = p.bbox;
            if !p.bbox.is_absent() && p.bbox.w >= 1.0 && p.bbox.h >= 1.0 {
                br.anchor = Some(p.bbox);
            }
            preds[k] = p;
        }
        self.state = Some(state);
        Ok((preds[0], preds[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use candle_core::{DType, Device};

    fn model() -> Arc<Model> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                depth: 1,
                dim: 16,
                heads: 1,
                patch: 16,
                mlp_ratio: 2,
                template_size: 32,
                search_size: 64,
                scam_layers: vec![1],
                share_branches: false,
            },
            ..ModelConfig::default()
        };
        Arc::new(Model::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap())
    }

    fn frame(i: usize) -> FramePair {
        let mut img = ImageF32::filled(120, 90, [40.0, 60.0, 80.0]);
        for y in 30..50 {
            for x in 40 + i..60 + i {
                img.set(x, y, [220.0, 200.0, 30.0]);
            }
        }
        let f = FrameRef::Image(Arc::new(img));
        FramePair {
            index: i,
            rgb: f.clone(),
            sonar: f,
        }
    }

    fn constant(v: f64) -> ScoreOverride {
        Box::new(move |_, _, m| ScoreMaps::uniform(m.side, v, 0.2))
    }

    #[test]
    fn gate_boundary() {
        let b = BBox::new(1., 2., 3., 4.);
        assert_eq!(gate(b, 0.5, 0.5).bbox, b);
        assert!(gate(b, 0.4999, 0.5).bbox.is_absent());
    }

    #[test]
    fn low_uniform_response_reports_absence() {
        let mut t = NetTracker::new(model(), TrackerConfig::default()).with_score_override(constant(0.3));
        let b = BBox::new(40., 30., 20., 20.);
        t.init(&frame(0), (b, b)).unwrap();
        let (r, s) = t.track(&frame(1)).unwrap();
        assert!(r.bbox.is_absent() && s.bbox.is_absent());
        assert_eq!(t.state().unwrap().rgb.anchor, Some(b));
    }

    #[test]
    fn half_confidence_emits_a_box() {
        let mut t = NetTracker::new(model(), TrackerConfig::default()).with_score_override(constant(0.5));
        let b = BBox::new(40., 30., 20., 20.);
        t.init(&frame(0), (b, b)).unwrap();
        let (r, s) = t.track(&frame(1)).unwrap();
        assert!(!r.bbox.is_absent() && !s.bbox.is_absent());
    }

    #[test]
    fn both_absent_init_fails() {
        let mut t = NetTracker::new(model(), TrackerConfig::default());
        assert!(t.init(&frame(0), (BBox::ABSENT, BBox::ABSENT)).is_err());
    }

    #[test]
    fn absent_branch_stays_absent_without_lazy_init() {
        let mut t = NetTracker::new(model(), TrackerConfig::default()).with_score_override(constant(0.9));
        t.init(&frame(0), (BBox::new(40., 30., 20., 20.), BBox::ABSENT)).unwrap();
        for i in 1..4 {
            let (r, s) = t.track(&frame(i)).unwrap();
            assert!(!r.bbox.is_absent());
            assert!(s.bbox.is_absent());
            assert_eq!(s.confidence, 0.0);
        }
    }

    #[test]
    fn lazy_init_starts_the_missing_branch() {
        let cfg = TrackerConfig {
            lazy_init: true,
            ..TrackerConfig::default()
        };
        let mut t = NetTracker::new(model(), cfg).with_score_override(constant(0.9));
        t.init(&frame(0), (BBox::new(40., 30., 20., 20.), BBox::ABSENT)).unwrap();
        let (_, s) = t.track(&frame(1)).unwrap();
        assert!(!s.bbox.is_absent());
        assert!(t.state().unwrap().sonar.is_initialized());
    }

    #[test]
    fn templates_frozen_and_tracking_deterministic() {
        let b = BBox::new(40., 30., 20., 20.);
        let run = || {
            let mut t = NetTracker::new(model(), TrackerConfig::default());
            t.init(&frame(0), (b, b)).unwrap();
            let z0 = t.state().unwrap().rgb.template.clone().unwrap();
            let mut out = Vec::new();
            for i in 1..6 {
                out.push(t.track(&frame(i)).unwrap());
            }
            let z1 = t.state().unwrap().rgb.template.clone().unwrap();
            let d = (z0 - z1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
            out
        };
        assert_eq!(run(), run());
    }
}
