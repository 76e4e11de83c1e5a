//! Deterministic toy data: a small dual-modality benchmark, SOT-layout
//! copies of its streams, a detection set of speckled radar-like scenes and
//! a preview grid of training examples.
//!
//! Output tree:
//!
//! ```text
//! <out>/benchmark/<seq>/{rgb/,sonar/,rgb.txt,sonar.txt,attributes.txt}
//! <out>/sot/<seq>_{rgb,sonar}/{img/,groundtruth.txt}
//! <out>/detection/{images/,annotations.json}
//! <out>/preview.png
//! ```
//!
//! Each sequence scripts a few challenges from its index: scale change at
//! low resolution, leaving the sonar field of view, a look-alike
//! distractor, an RGB occlusion, dim imagery and sonar clutter. The two
//! modalities follow unrelated trajectories, so the same target sits at
//! different pixel coordinates in each.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::annotation::write_boxes;
use crate::boxgeom::BBox;
use crate::config::{DatagenConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evalkit::Attribute;
use crate::imaging::{draw_box, tile, ImageF32};
use crate::srst::data::{read_detection_json, read_sot_root};
use crate::srst::{slot_rng, TrainingSampler};
use crate::train::crop_sizes;

const STREAM_RGB: u64 = 1;
const STREAM_SONAR: u64 = 2;
const STREAM_DETECTION: u64 = 3;
const PREVIEW_EXAMPLES: usize = 8;

#[derive(Debug, Clone)]
pub struct DatagenOutput {
    pub benchmark: PathBuf,
    pub sot: PathBuf,
    pub detection_json: PathBuf,
    pub preview: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

/// Scripted challenges of one sequence.
#[derive(Debug, Clone, Default)]
struct Script {
    scale_change: bool,
    sonar_out_of_view: Option<Range<usize>>,
    distractor: bool,
    rgb_occluded: Option<Range<usize>>,
    dim: bool,
    clutter: bool,
    low_res: bool,
}

impl Script {
    fn for_index(k: usize, frames: usize) -> Self {
        let gap = (frames / 2)..(frames / 2 + (frames / 5).max(1)).min(frames);
        let mut s = Script::default();
        match k % 6 {
            0 => {
                s.scale_change = true;
                s.low_res = true;
            }
            1 => s.sonar_out_of_view = Some(gap),
            2 => s.distractor = true,
            3 => s.rgb_occluded = Some(gap),
            4 => s.dim = true,
            _ => s.clutter = true,
        }
        s
    }

    fn attributes(&self) -> Vec<Attribute> {
        let mut a = Vec::new();
        if self.rgb_occluded.is_some() {
            a.push(Attribute::OC);
        }
        if self.sonar_out_of_view.is_some() {
            a.push(Attribute::FOV);
        }
        if self.distractor {
            a.push(Attribute::SA);
        }
        if self.scale_change {
            a.push(Attribute::SV);
        }
        if self.low_res {
            a.push(Attribute::VLR);
        }
        if self.clutter {
            a.extend([Attribute::SC, Attribute::DEF]);
        }
        if self.dim {
            a.extend([Attribute::LI, Attribute::LSR]);
        }
        a
    }
}

/// A box bouncing inside the frame with optional periodic size change.
#[derive(Debug, Clone)]
struct Track {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Track {
    fn random(rng: &mut ChaCha8Rng, width: f64, height: f64) -> Self {
        let w = rng.random_range(0.14..0.2) * width;
        let h = rng.random_range(0.18..0.26) * height;
        let speed = rng.random_range(1.5..3.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            cx: rng.random_range(0.35..0.65) * width,
            cy: rng.random_range(0.35..0.65) * height,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
        }
    }

    /// Boxes for `n` frames, kept fully inside a `width x height` image.
    fn boxes(&self, n: usize, width: f64, height: f64, scale_change: bool) -> Vec<BBox> {
        let mut t = self.clone();
        (0..n)
            .map(|i| {
                let s = if scale_change {
                    1.0 + 0.35 * (i as f64 * std::f64::consts::TAU / n as f64).sin()
                } else {
                    1.0
                };
                let (w, h) = (t.w * s, t.h * s);
                t.cx = t.cx.clamp(w / 2.0 + 1.0, width - w / 2.0 - 1.0);
                t.cy = t.cy.clamp(h / 2.0 + 1.0, height - h / 2.0 - 1.0);
                let b = BBox::from_center(t.cx, t.cy, w, h);
                t.cx += t.vx;
                t.cy += t.vy;
                if t.cx - w / 2.0 < 1.0 || t.cx + w / 2.0 > width - 1.0 {
                    t.vx = -t.vx;
                }
                if t.cy - h / 2.0 < 1.0 || t.cy + h / 2.0 > height - 1.0 {
                    t.vy = -t.vy;
                }
                b
            })
            .collect()
    }
}

/// Smooth colored texture from a few random plane waves plus pixel noise.
struct Texture {
    base: [f32; 3],
    waves: Vec<(f32, f32, f32, [f32; 3])>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [
            rng.random_range(60.0..150.0),
            rng.random_range(60.0..150.0),
            rng.random_range(60.0..150.0),
        ];
        let waves = (0..4)
            .map(|_| {
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                let f = rng.random_range(0.03..0.15);
                let amp = [
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-25.0..25.0),
                ];
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f32::consts::TAU), amp)
            })
            .collect();
        Self { base, waves }
    }

    fn render(&self, w: usize, h: usize, shift: f32, rng: &mut ChaCha8Rng) -> ImageF32 {
        let mut img = ImageF32::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut px = self.base;
                for (kx, ky, ph, amp) in &self.waves {
                    let s = (kx * (x as f32 + shift) + ky * y as f32 + ph).sin();
                    for c in 0..3 {
                        px[c] += amp[c] * s;
                    }
                }
                let n = rng.random_range(-8.0..8.0);
                img.set(x, y, px.map(|v| (v + n).clamp(0.0, 255.0)));
            }
        }
        img
    }
}

fn paint_shape(img: &mut ImageF32, b: &BBox, shape: Shape, color: [f32; 3], rim: [f32; 3]) {
    let (cx, cy) = b.center();
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.x2().ceil() as usize).min(img.width);
    let y1 = (b.y2().ceil() as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = ((px - cx) / rx, (py - cy) / ry);
            let (inside, edge) = match shape {
                Shape::Rect => (u.abs() <= 1.0 && v.abs() <= 1.0, u.abs().max(v.abs()) > 0.8),
                Shape::Ellipse => {
                    let r = u * u + v * v;
                    (r <= 1.0, r > 0.6)
                }
            };
            if inside {
                img.set(x, y, if edge { rim } else { color });
            }
        }
    }
}

fn scale(img: &mut ImageF32, k: f32) {
    for v in &mut img.data {
        *v *= k;
    }
}

/// Replaces every `k x k` block by its mean.
fn pixelate(img: &mut ImageF32, k: usize) {
    for by in (0..img.height).step_by(k) {
        for bx in (0..img.width).step_by(k) {
            let ys = by..(by + k).min(img.height);
            let xs = bx..(bx + k).min(img.width);
            let mut acc = [0.0f32; 3];
            for y in ys.clone() {
                for x in xs.clone() {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += img.get(x, y, c);
                    }
                }
            }
            let n = (ys.len() * xs.len()) as f32;
            for y in ys.clone() {
                for x in xs.clone() {
                    img.set(x, y, acc.map(|a| a / n));
                }
            }
        }
    }
}

/// Speckled dark scene; values in `[0, 255]`, single channel.
fn speckle(w: usize, h: usize, level: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let exp = Exp::new(1.0f32).expect("rate is positive");
    (0..w * h)
        .map(|i| {
            let y = (i / w) as f32 / h as f32;
            (level * (0.6 + 0.4 * y) * exp.sample(rng)).min(255.0)
        })
        .collect()
}

/// Adds a bright speckled ellipse of peak `gain` centred in `b`.
fn paint_echo(plane: &mut [f32], w: usize, b: &BBox, gain: f32, rng: &mut ChaCha8Rng) {
    let h = plane.len() / w;
    let (cx, cy) = b.center();
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.x2().ceil() as usize).min(w);
    let y1 = (b.y2().ceil() as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let r = u * u + v * v;
            if r <= 1.0 {
                let fall = (1.0 - 0.5 * r) as f32;
                let p = &mut plane[y * w + x];
                *p = (*p + gain * fall * rng.random_range(0.75f32..1.0)).min(255.0);
            }
        }
    }
}

struct RenderedSequence {
    rgb: Vec<ImageF32>,
    sonar: Vec<ImageF32>,
    rgb_boxes: Vec<BBox>,
    sonar_boxes: Vec<BBox>,
    attributes: Vec<Attribute>,
}

fn render_sequence(seed: u64, k: usize, cfg: &DatagenConfig) -> RenderedSequence {
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f64, h as f64);
    let n = cfg.frames;
    let script = Script::for_index(k, n);

    let mut rng = slot_rng(seed, STREAM_RGB, k as u64);
    let texture = Texture::random(&mut rng);
    let shape = if k % 2 == 0 { Shape::Rect } else { Shape::Ellipse };
    let color = [
        rng.random_range(180.0..255.0),
        rng.random_range(0.0..90.0),
        rng.random_range(60.0..200.0),
    ];
    let rim = color.map(|c| c * 0.5);
    let track = Track::random(&mut rng, wf, hf);
    let mut rgb_boxes = track.boxes(n, wf, hf, script.scale_change);
    let distractor = Track::random(&mut rng, wf, hf).boxes(n, wf, hf, false);
    let mut rgb = Vec::with_capacity(n);
    for (i, b) in rgb_boxes.iter_mut().enumerate() {
        let mut img = texture.render(w, h, i as f32 * 0.5, &mut rng);
        if script.distractor {
            paint_shape(&mut img, &distractor[i], shape, color.map(|c| c * 0.9), rim);
        }
        let occluded = script.rgb_occluded.as_ref().is_some_and(|r| r.contains(&i));
        if occluded {
            let cover = BBox::from_center(b.center().0, b.center().1, b.w + 6.0, b.h + 6.0);
            paint_shape(&mut img, &cover.clamp_to_image(wf, hf), Shape::Rect, [90.0, 90.0, 90.0], [70.0, 70.0, 70.0]);
            *b = BBox::ABSENT;
        } else {
            paint_shape(&mut img, b, shape, color, rim);
        }
        if script.dim {
            scale(&mut img, 0.45);
        }
        if script.low_res {
            pixelate(&mut img, 3);
        }
        rgb.push(img);
    }

    let mut rng = slot_rng(seed, STREAM_SONAR, k as u64);
    let mut echo = Track::random(&mut rng, wf, hf);
    echo.w *= 0.8;
    echo.h *= 0.6;
    let mut sonar_boxes = echo.boxes(n, wf, hf, script.scale_change);
    let clutter: Vec<BBox> = (0..3)
        .map(|_| {
            let cx = rng.random_range(0.1..0.9) * wf;
            let cy = rng.random_range(0.1..0.9) * hf;
            BBox::from_center(cx, cy, 0.08 * wf, 0.08 * hf)
        })
        .collect();
    let gain = if script.dim { 110.0 } else { 200.0 };
    let mut sonar = Vec::with_capacity(n);
    for (i, b) in sonar_boxes.iter_mut().enumerate() {
        let mut plane = speckle(w, h, 18.0, &mut rng);
        if script.clutter {
            for c in &clutter {
                paint_echo(&mut plane, w, c, 110.0, &mut rng);
            }
            // the echo stretches and squashes over time
            let s = 1.0 + 0.3 * (i as f64 * 0.4).sin();
            let (cx, cy) = b.center();
            *b = BBox::from_center(cx, cy, b.w * s, b.h / s).clamp_to_image(wf, hf);
        }
        let gone = script.sonar_out_of_view.as_ref().is_some_and(|r| r.contains(&i));
        if gone {
            *b = BBox::ABSENT;
        } else {
            paint_echo(&mut plane, w, b, gain, &mut rng);
        }
        sonar.push(ImageF32::from_gray(w, h, &plane));
    }

    RenderedSequence {
        rgb,
        sonar,
        rgb_boxes,
        sonar_boxes,
        attributes: script.attributes(),
    }
}

fn frame_name(i: usize) -> String {
    format!("{:06}.png", i + 1)
}

fn write_stream(dir: &Path, frames: &[ImageF32]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&dir.join(frame_name(i)))?;
    }
    Ok(())
}

pub fn sequence_name(k: usize) -> String {
    format!("toy{:02}", k + 1)
}

/// Radar-like detection scenes: speckle plus a few bright targets, with a
/// `{path: [[x, y, w, h], ...]}` annotation map.
fn write_detection(root: &Path, seed: u64, cfg: &DatagenConfig) -> Result<PathBuf> {
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir)?;
    let (w, h) = (cfg.width, cfg.height);
    let mut map: BTreeMap<String, Vec<[f64; 4]>> = BTreeMap::new();
    for k in 0..cfg.detection_images {
        let mut rng = slot_rng(seed, STREAM_DETECTION, k as u64);
        let mut plane = speckle(w, h, 22.0, &mut rng);
        let count = rng.random_range(1..=3);
        let mut boxes = Vec::new();
        for _ in 0..count {
            let bw = rng.random_range(0.08..0.2) * w as f64;
            let bh = rng.random_range(0.08..0.2) * h as f64;
            let x = rng.random_range(1.0..(w as f64 - bw - 1.0));
            let y = rng.random_range(1.0..(h as f64 - bh - 1.0));
            let b = BBox::new(x.round(), y.round(), bw.round(), bh.round());
            paint_echo(&mut plane, w, &b, 190.0, &mut rng);
            boxes.push([b.x, b.y, b.w, b.h]);
        }
        let name = format!("images/{}", frame_name(k));
        ImageF32::from_gray(w, h, &plane).save(&root.join(&name))?;
        map.insert(name, boxes);
    }
    let path = root.join("annotations.json");
    fs::write(&path, serde_json::to_string_pretty(&map)? + "\n")?;
    Ok(path)
}

/// Tiles training examples, one row each: RGB template, RGB search, sonar
/// template, sonar search, with ground truth outlined in the search crops.
pub fn preview_grid(cfg: &RunConfig, sot: &Path, detection_json: &Path, count: usize) -> Result<ImageF32> {
    let mut records = read_sot_root(sot)?;
    if cfg.srst.detection {
        records.extend(read_detection_json(detection_json)?);
    }
    let sampler = TrainingSampler::new(records, cfg.srst.clone(), crop_sizes(cfg), cfg.seed)?;
    let sizes = sampler.sizes();
    let mut cells = Vec::with_capacity(count * 4);
    for i in 0..count as u64 {
        let e = sampler.example(0, i)?;
        let side = sizes.search as f64;
        let to_px = |b: &BBox| {
            if b.is_absent() {
                *b
            } else {
                BBox::new(b.x * side, b.y * side, b.w * side, b.h * side)
            }
        };
        let mut x_rgb = e.x_rgb.clone();
        draw_box(&mut x_rgb, &to_px(&e.gt_rgb), [0.0, 255.0, 0.0]);
        let mut x_son = e.x_son.clone();
        draw_box(&mut x_son, &to_px(&e.gt_son), [255.0, 255.0, 255.0]);
        cells.extend([e.z_rgb, x_rgb, e.z_son, x_son]);
    }
    Ok(tile(&cells, 4, 4))
}

/// Writes the whole toy data tree under `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<DatagenOutput> {
    let d = &cfg.datagen;
    if d.sequences == 0 || d.frames < 2 || d.width < 32 || d.height < 32 {
        return Err(Error::config(
            "datagen needs at least one sequence, two frames and 32x32 images",
        ));
    }
    let bench = out.join("benchmark");
    let sot = out.join("sot");
    for k in 0..d.sequences {
        let seq = render_sequence(cfg.seed, k, d);
        let name = sequence_name(k);
        let dir = bench.join(&name);
        write_stream(&dir.join("rgb"), &seq.rgb)?;
        write_stream(&dir.join("sonar"), &seq.sonar)?;
        write_boxes(&dir.join("rgb.txt"), &seq.rgb_boxes)?;
        write_boxes(&dir.join("sonar.txt"), &seq.sonar_boxes)?;
        let tags: Vec<&str> = seq.attributes.iter().map(|a| a.name()).collect();
        fs::write(dir.join("attributes.txt"), tags.join(",") + "\n")?;
        for (m, frames, boxes) in [("rgb", &seq.rgb, &seq.rgb_boxes), ("sonar", &seq.sonar, &seq.sonar_boxes)] {
            let sdir = sot.join(format!("{name}_{m}"));
            write_stream(&sdir.join("img"), frames)?;
            write_boxes(&sdir.join("groundtruth.txt"), boxes)?;
        }
    }
    let detection_json = write_detection(&out.join("detection"), cfg.seed, d)?;
    let preview = out.join("preview.png");
    preview_grid(cfg, &sot, &detection_json, PREVIEW_EXAMPLES)?.save(&preview)?;
    Ok(DatagenOutput {
        benchmark: bench,
        sot,
        detection_json,
        preview,
    })
}
