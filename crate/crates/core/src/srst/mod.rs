//! Pseudo RGB-sonar training pairs built from ordinary single-modality data.
//!
//! Two frames are drawn from one sequence. The first feeds the RGB branch,
//! the second is converted to a grayscale saliency map and feeds the sonar
//! branch, so the two branches see the same object at different positions.

pub mod data;
pub mod saliency;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{FrameCache, FrameRef, SequenceRecord, Source};
pub use saliency::{to_saliency, to_saliency_with, Saliency, SpectralResidual};

use crate::boxgeom::{crop_window, BBox, CropWindow};
use crate::error::{Error, Result};
use crate::imaging::ImageF32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixWeights {
    pub sot: f64,
    pub detection: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            sot: 0.85,
            detection: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrstConfig {
    /// Largest frame distance between the RGB and sonar picks.
    pub max_gap: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Search-crop side multiplier range.
    pub scale_jitter: [f64; 2],
    /// Search-crop center shift, as a fraction of the crop side.
    pub shift_jitter: f64,
    /// Convert sonar-branch SOT crops to saliency maps.
    pub saliency: bool,
    /// Draw from detection records at all.
    pub detection: bool,
    pub mix: MixWeights,
    pub max_resample: usize,
}

impl Default for SrstConfig {
    fn default() -> Self {
        Self {
            max_gap: 200,
            template_factor: crate::boxgeom::TEMPLATE_CONTEXT,
            search_factor: crate::boxgeom::SEARCH_CONTEXT,
            scale_jitter: [0.85, 1.18],
            shift_jitter: 0.1,
            saliency: true,
            detection: true,
            mix: MixWeights::default(),
            max_resample: 8,
        }
    }
}

impl SrstConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("srst.scale_jitter {lo}..{hi} must satisfy 0 < lo <= hi")));
        }
        if !(self.shift_jitter >= 0.0) {
            return Err(Error::config("srst.shift_jitter must be >= 0"));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::config("srst context factors must be positive"));
        }
        if !(self.mix.sot >= 0.0 && self.mix.detection >= 0.0 && self.mix.sot + self.mix.detection > 0.0) {
            return Err(Error::config("srst.mix weights must be non-negative with a positive sum"));
        }
        Ok(())
    }

    /// No scale or shift jitter.
    pub fn without_jitter(mut self) -> Self {
        self.scale_jitter = [1.0, 1.0];
        self.shift_jitter = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSizes {
    pub template: usize,
    pub search: usize,
}

/// One training sample. Ground truths are in crop-normalized `[0, 1]` units
/// of the matching search crop, or [`BBox::ABSENT`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub z_rgb: ImageF32,
    pub x_rgb: ImageF32,
    pub z_son: ImageF32,
    pub x_son: ImageF32,
    pub gt_rgb: BBox,
    pub gt_son: BBox,
    pub source: Source,
    pub frames: (usize, usize),
}

/// Seeded generator for one `(step, index)` slot of a run.
pub fn slot_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 20) ^ index);
    rng
}

pub fn sample_pair(seq: &SequenceRecord, seed: u64, max_gap: usize) -> Result<(usize, usize)> {
    sample_pair_rng(seq, &mut ChaCha8Rng::seed_from_u64(seed), max_gap)
}

/// Picks `a` uniformly among annotated frames, then `b` uniformly among
/// annotated frames within `max_gap` of `a`.
pub fn sample_pair_rng(seq: &SequenceRecord, rng: &mut impl Rng, max_gap: usize) -> Result<(usize, usize)> {
    let valid = seq.valid_frames();
    if valid.is_empty() {
        return Err(Error::data(format!("{}: no annotated frames", seq.name)));
    }
    let a = valid[rng.random_range(0..valid.len())];
    let lo = valid.partition_point(|&i| i + max_gap < a);
    let hi = valid.partition_point(|&i| i <= a + max_gap);
    let b = valid[rng.random_range(lo..hi)];
    Ok((a, b))
}

struct BranchCrops {
    z: ImageF32,
    x: ImageF32,
    gt: BBox,
}

fn crop_branch(
    img: &ImageF32,
    b: &BBox,
    cfg: &SrstConfig,
    sizes: CropSizes,
    rng: &mut ChaCha8Rng,
) -> Result<BranchCrops> {
    let zw = crop_window(b, cfg.template_factor, sizes.template)?;
    let base = crop_window(b, cfg.search_factor, sizes.search)?;
    let [lo, hi] = cfg.scale_jitter;
    let mut gt = BBox::ABSENT;
    let mut xw = base;
    for _ in 0..=cfg.max_resample {
        let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let side = base.side * s;
        let (dx, dy) = if cfg.shift_jitter > 0.0 {
            let m = cfg.shift_jitter * side;
            (rng.random_range(-m..=m), rng.random_range(-m..=m))
        } else {
            (0.0, 0.0)
        };
        xw = CropWindow::new(base.cx + dx, base.cy + dy, side, sizes.search)?;
        let n = xw.to_normalized(b);
        let (cx, cy) = n.center();
        if (0.0..1.0).contains(&cx) && (0.0..1.0).contains(&cy) {
            gt = n.clamp_to(0.0, 0.0, 1.0, 1.0);
            break;
        }
    }
    Ok(BranchCrops {
        z: img.crop_resize(&zw),
        x: img.crop_resize(&xw),
        gt,
    })
}

fn to_gray3(img: &ImageF32) -> ImageF32 {
    ImageF32::from_gray(img.width, img.height, &img.to_gray())
}

/// Builds one example from `seq`, drawing all randomness from `rng`.
pub fn make_training_example_rng(
    seq: &SequenceRecord,
    rng: &mut ChaCha8Rng,
    cfg: &SrstConfig,
    sizes: CropSizes,
    cache: &FrameCache,
    backend: &dyn Saliency,
) -> Result<TrainingExample> {
    let (a, b) = sample_pair_rng(seq, rng, cfg.max_gap)?;
    let img_a = cache.load(&seq.frames[a])?;
    let img_b: Arc<ImageF32> = if a == b { img_a.clone() } else { cache.load(&seq.frames[b])? };
    let rgb = crop_branch(&img_a, &seq.boxes[a], cfg, sizes, rng)?;
    let son = crop_branch(&img_b, &seq.boxes[b], cfg, sizes, rng)?;
    // detection imagery is already sonar-like, it only loses its color
    let (z_son, x_son) = match (seq.source, cfg.saliency) {
        (Source::Sot, true) => (
            to_saliency_with(backend, &son.z),
            to_saliency_with(backend, &son.x),
        ),
        (Source::Detection, _) => (to_gray3(&son.z), to_gray3(&son.x)),
        (Source::Sot, false) => (son.z, son.x),
    };
    Ok(TrainingExample {
        z_rgb: rgb.z,
        x_rgb: rgb.x,
        z_son,
        x_son,
        gt_rgb: rgb.gt,
        gt_son: son.gt,
        source: seq.source,
        frames: (a, b),
    })
}

pub fn make_training_example(seq: &SequenceRecord, seed: u64, cfg: &SrstConfig, sizes: CropSizes) -> Result<TrainingExample> {
    make_training_example_rng(
        seq,
        &mut ChaCha8Rng::seed_from_u64(seed),
        cfg,
        sizes,
        &FrameCache::new(false),
        &SpectralResidual::default(),
    )
}

/// Mixed-source example stream. Every `(step, index)` slot owns its own
/// generator, so batches are reproducible regardless of worker count.
pub struct TrainingSampler {
    sot: Vec<SequenceRecord>,
    detection: Vec<SequenceRecord>,
    cfg: SrstConfig,
    sizes: CropSizes,
    seed: u64,
    cache: FrameCache,
    backend: Box<dyn Saliency>,
}

impl TrainingSampler {
    pub fn new(records: Vec<SequenceRecord>, cfg: SrstConfig, sizes: CropSizes, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (sot, detection): (Vec<_>, Vec<_>) = records
            .into_iter()
            .filter(|r| !r.valid_frames().is_empty())
            .partition(|r| r.source == Source::Sot);
        let detection = if cfg.detection { detection } else { Vec::new() };
        if sot.is_empty() && detection.is_empty() {
            return Err(Error::data("no usable training sequences"));
        }
        Ok(Self {
            sot,
            detection,
            cfg,
            sizes,
            seed,
            cache: FrameCache::new(true),
            backend: Box::new(SpectralResidual::default()),
        })
    }

    pub fn with_backend(mut self, backend: Box<dyn Saliency>) -> Self {
        self.backend = backend;
        self
    }

    pub fn config(&self) -> &SrstConfig {
        &self.cfg
    }

    pub fn sizes(&self) -> CropSizes {
        self.sizes
    }

    /// Source for the next draw, by mixing weight among non-empty pools.
    pub fn pick_source(&self, rng: &mut impl Rng) -> Source {
        let ws = if self.sot.is_empty() { 0.0 } else { self.cfg.mix.sot };
        let wd = if self.detection.is_empty() { 0.0 } else { self.cfg.mix.detection };
        if wd == 0.0 {
            return Source::Sot;
        }
        if ws == 0.0 {
            return Source::Detection;
        }
        if rng.random::<f64>() * (ws + wd) < ws {
            Source::Sot
        } else {
            Source::Detection
        }
    }

    pub fn example(&self, step: u64, index: u64) -> Result<TrainingExample> {
        let mut rng = slot_rng(self.seed, step, index);
        let pool = match self.pick_source(&mut rng) {
            Source::Sot => &self.sot,
            Source::Detection => &self.detection,
        };
        let seq = &pool[rng.random_range(0..pool.len())];
        make_training_example_rng(seq, &mut rng, &self.cfg, self.sizes, &self.cache, self.backend.as_ref())
    }

    pub fn batch(&self, step: u64, size: usize) -> Result<Vec<TrainingExample>> {
        (0..size as u64)
            .into_par_iter()
            .map(|i| self.example(step, i))
            .collect()
    }
}
