//! One-pass evaluation over a dual-modality benchmark.
//!
//! Benchmark layout, one folder per sequence:
//!
//! ```text
//! <root>/<seq>/rgb/*.jpg     <root>/<seq>/rgb.txt
//! <root>/<seq>/sonar/*.jpg   <root>/<seq>/sonar.txt
//! <root>/<seq>/attributes.txt   (comma-separated tags, optional)
//! ```
//!
//! Result layout: `<out>/<seq>/rgb.txt` and `<out>/<seq>/sonar.txt`, one
//! `x,y,w,h` line per frame with `0,0,0,0` for a reported absence.
//!
//! Scores are pooled over all frames of all sequences by default; each frame
//! counts once regardless of sequence length.

pub mod metrics;
pub mod plots;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{frame_outcome, BothAbsent, Curves, MetricCurve, Outcome, SuccessRule};

use crate::annotation::{read_boxes, write_boxes};
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::srst::data::{list_images, FrameRef};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    /// occlusion
    OC,
    /// out of view
    FOV,
    /// similar appearance in RGB
    SA,
    /// scale variation
    SV,
    /// sonar crossover: similar reflection to the surroundings
    SC,
    /// deformation in sonar
    DEF,
    /// visual low resolution
    VLR,
    /// low illumination
    LI,
    /// low sonar reflection
    LSR,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::OC,
        Attribute::FOV,
        Attribute::SA,
        Attribute::SV,
        Attribute::SC,
        Attribute::DEF,
        Attribute::VLR,
        Attribute::LI,
        Attribute::LSR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::OC => "OC",
            Attribute::FOV => "FOV",
            Attribute::SA => "SA",
            Attribute::SV => "SV",
            Attribute::SC => "SC",
            Attribute::DEF => "DEF",
            Attribute::VLR => "VLR",
            Attribute::LI => "LI",
            Attribute::LSR => "LSR",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Attribute::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::data(format!("unknown attribute tag {t:?}")))
    }
}

pub fn parse_attributes(text: &str) -> Result<Vec<Attribute>> {
    let mut out: Vec<Attribute> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Sonar,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Sonar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Sonar => "sonar",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceAnnotation {
    pub name: String,
    pub rgb_frames: Vec<FrameRef>,
    pub sonar_frames: Vec<FrameRef>,
    pub rgb_boxes: Vec<BBox>,
    pub sonar_boxes: Vec<BBox>,
    pub attributes: Vec<Attribute>,
}

impl SequenceAnnotation {
    pub fn new(
        name: impl Into<String>,
        rgb_frames: Vec<FrameRef>,
        sonar_frames: Vec<FrameRef>,
        rgb_boxes: Vec<BBox>,
        sonar_boxes: Vec<BBox>,
        attributes: Vec<Attribute>,
    ) -> Result<Self> {
        let name = name.into();
        let n = rgb_boxes.len();
        if n == 0 {
            return Err(Error::data(format!("{name}: no frames")));
        }
        if rgb_frames.len() != n || sonar_frames.len() != n || sonar_boxes.len() != n {
            return Err(Error::data(format!(
                "{name}: frame/box counts differ (rgb {} frames / {} boxes, sonar {} frames / {} boxes)",
                rgb_frames.len(),
                n,
                sonar_frames.len(),
                sonar_boxes.len()
            )));
        }
        Ok(Self {
            name,
            rgb_frames,
            sonar_frames,
            rgb_boxes,
            sonar_boxes,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb_boxes.is_empty()
    }

    pub fn boxes(&self, m: Modality) -> &[BBox] {
        match m {
            Modality::Rgb => &self.rgb_boxes,
            Modality::Sonar => &self.sonar_boxes,
        }
    }

    pub fn frame(&self, i: usize) -> FramePair {
        FramePair {
            index: i,
            rgb: self.rgb_frames[i].clone(),
            sonar: self.sonar_frames[i].clone(),
        }
    }
}

/// Reads every sequence under `root`, sorted by name. Sequences missing a
/// modality folder or annotation are skipped with a warning.
pub fn load_benchmark(root: &Path) -> Result<Vec<SequenceAnnotation>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let complete = ["rgb", "sonar"]
            .iter()
            .all(|m| dir.join(m).is_dir() && dir.join(format!("{m}.txt")).is_file());
        if !complete {
            log::warn!("skipping {name}: missing modality folder or annotation");
            continue;
        }
        let attributes = match fs::read_to_string(dir.join("attributes.txt")) {
            Ok(t) => parse_attributes(&t).map_err(|e| Error::data(format!("{name}: {e}")))?,
            Err(_) => Vec::new(),
        };
        let frames = |m: &str| -> Result<Vec<FrameRef>> {
            Ok(list_images(&dir.join(m))?.into_iter().map(FrameRef::Path).collect())
        };
        out.push(SequenceAnnotation::new(
            name,
            frames("rgb")?,
            frames("sonar")?,
            read_boxes(&dir.join("rgb.txt"))?,
            read_boxes(&dir.join("sonar.txt"))?,
            attributes,
        )?);
    }
    if out.is_empty() {
        return Err(Error::data(format!("no sequences found under {}", root.display())));
    }
    Ok(out)
}

/// One time step of both streams.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub index: usize,
    pub rgb: FrameRef,
    pub sonar: FrameRef,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub confidence: f64,
}

impl Prediction {
    pub const ABSENT: Prediction = Prediction {
        bbox: BBox::ABSENT,
        confidence: 0.0,
    };
}

/// A tracker that follows one target in both modalities.
pub trait PairTracker {
    /// `boxes` are the first-frame annotations; either may be absent.
    fn init(&mut self, frame: &FramePair, boxes: (BBox, BBox)) -> Result<()>;
    fn track(&mut self, frame: &FramePair) -> Result<(Prediction, Prediction)>;
}

/// Per-sequence predictions in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub rgb: Vec<BBox>,
    pub sonar: Vec<BBox>,
}

impl SequenceResult {
    pub fn boxes(&self, m: Modality) -> &[BBox] {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Sonar => &self.sonar,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let dir = out_dir.join(&self.name);
        fs::create_dir_all(&dir)?;
        write_boxes(&dir.join("rgb.txt"), &self.rgb)?;
        write_boxes(&dir.join("sonar.txt"), &self.sonar)
    }

    pub fn read(results_dir: &Path, name: &str) -> Result<Self> {
        let dir = results_dir.join(name);
        Ok(Self {
            name: name.to_string(),
            rgb: read_boxes(&dir.join("rgb.txt"))?,
            sonar: read_boxes(&dir.join("sonar.txt"))?,
        })
    }
}

/// Initializes on frame 0 and tracks every later frame once, never
/// re-initializing. Frame 0 reports the initialization boxes.
pub fn run_sequence(tracker: &mut dyn PairTracker, seq: &SequenceAnnotation) -> Result<SequenceResult> {
    let first = (seq.rgb_boxes[0], seq.sonar_boxes[0]);
    tracker.init(&seq.frame(0), first)?;
    let mut rgb = Vec::with_capacity(seq.len());
    let mut sonar = Vec::with_capacity(seq.len());
    rgb.push(first.0);
    sonar.push(first.1);
    for i in 1..seq.len() {
        let (r, s) = tracker.track(&seq.frame(i))?;
        rgb.push(r.bbox);
        sonar.push(s.bbox);
    }
    Ok(SequenceResult {
        name: seq.name.clone(),
        rgb,
        sonar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every frame of every sequence weighs the same.
    #[default]
    FramePooled,
    /// Curves are computed per sequence and averaged point-wise.
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub both_absent: BothAbsent,
    pub success: SuccessRule,
    pub aggregation: Aggregation,
}

/// Frame outcomes of one modality of one sequence. A length mismatch is a
/// hard error naming the sequence.
pub fn sequence_outcomes(pred: &[BBox], gt: &[BBox], name: &str, protocol: &Protocol) -> Result<Vec<Outcome>> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!(
            "{name}: {} result lines for {} annotated frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut out = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        if let Some(o) = frame_outcome(p, g, protocol.both_absent)? {
            out.push(o);
        }
    }
    Ok(out)
}

/// Curves over a group of sequences' outcomes under `protocol`.
pub fn aggregate(groups: &[&[Outcome]], protocol: &Protocol) -> Option<Curves> {
    match protocol.aggregation {
        Aggregation::FramePooled => {
            let pooled: Vec<Outcome> = groups.iter().flat_map(|g| g.iter().copied()).collect();
            (!pooled.is_empty()).then(|| Curves::of(&pooled, protocol.success))
        }
        Aggregation::SequenceMean => {
            let per: Vec<Curves> = groups
                .iter()
                .filter(|g| !g.is_empty())
                .map(|g| Curves::of(g, protocol.success))
                .collect();
            Curves::average(&per)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "PR")]
    pub pr: f64,
    #[serde(rename = "NPR")]
    pub npr: f64,
    pub frames: usize,
}

impl Scores {
    fn of(c: &Curves, frames: usize) -> Self {
        Self {
            sr: c.sr(),
            pr: c.pr(),
            npr: c.npr(),
            frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub success: MetricCurve,
    pub precision: MetricCurve,
    pub norm_precision: MetricCurve,
}

/// Scores of one tracker on one modality; the summary JSON is an array of
/// these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub tracker: String,
    pub modality: Modality,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "PR")]
    pub pr: f64,
    #[serde(rename = "NPR")]
    pub npr: f64,
    pub frames: usize,
    pub sequences: usize,
    pub protocol: Protocol,
    /// Attribute tag (and `ALL`) to scores over the frames of the sequences
    /// carrying it.
    pub per_attribute: BTreeMap<String, Scores>,
    pub curves: CurveSet,
}

/// Per-attribute scores of one modality. Rows with no tagged sequence are
/// omitted with a warning; the `ALL` row covers every sequence.
pub fn attribute_report(
    results: &[SequenceResult],
    annotations: &[SequenceAnnotation],
    modality: Modality,
    protocol: &Protocol,
) -> Result<BTreeMap<String, Scores>> {
    let per_seq = outcomes_by_sequence(results, annotations, modality, protocol)?;
    let mut rows = BTreeMap::new();
    let all: Vec<&[Outcome]> = per_seq.iter().map(|(_, o)| o.as_slice()).collect();
    if let Some(c) = aggregate(&all, protocol) {
        rows.insert("ALL".to_string(), Scores::of(&c, all.iter().map(|g| g.len()).sum()));
    }
    for attr in Attribute::ALL {
        let groups: Vec<&[Outcome]> = per_seq
            .iter()
            .filter(|(a, _)| a.attributes.contains(&attr))
            .map(|(_, o)| o.as_slice())
            .collect();
        match aggregate(&groups, protocol) {
            Some(c) => {
                rows.insert(attr.name().to_string(), Scores::of(&c, groups.iter().map(|g| g.len()).sum()));
            }
            None => log::warn!("no {modality} frames tagged {attr}; row omitted"),
        }
    }
    Ok(rows)
}

fn outcomes_by_sequence<'a>(
    results: &[SequenceResult],
    annotations: &'a [SequenceAnnotation],
    modality: Modality,
    protocol: &Protocol,
) -> Result<Vec<(&'a SequenceAnnotation, Vec<Outcome>)>> {
    results
        .iter()
        .map(|r| {
            let ann = annotations
                .iter()
                .find(|a| a.name == r.name)
                .ok_or_else(|| Error::data(format!("no annotation for result sequence {}", r.name)))?;
            Ok((ann, sequence_outcomes(r.boxes(modality), ann.boxes(modality), &r.name, protocol)?))
        })
        .collect()
}

/// Scores results against annotations, one summary per modality.
pub fn evaluate(
    tracker: &str,
    results: &[SequenceResult],
    annotations: &[SequenceAnnotation],
    protocol: &Protocol,
) -> Result<Vec<Summary>> {
    if results.is_empty() {
        return Err(Error::data("no result sequences to evaluate"));
    }
    Modality::BOTH
        .iter()
        .map(|&m| {
            let per_seq = outcomes_by_sequence(results, annotations, m, protocol)?;
            let groups: Vec<&[Outcome]> = per_seq.iter().map(|(_, o)| o.as_slice()).collect();
            let frames = groups.iter().map(|g| g.len()).sum();
            let curves = aggregate(&groups, protocol)
                .ok_or_else(|| Error::data(format!("no scored {m} frames")))?;
            Ok(Summary {
                schema_version: SCHEMA_VERSION,
                tracker: tracker.to_string(),
                modality: m,
                sr: curves.sr(),
                pr: curves.pr(),
                npr: curves.npr(),
                frames,
                sequences: results.len(),
                protocol: *protocol,
                per_attribute: attribute_report(results, annotations, m, protocol)?,
                curves: CurveSet {
                    success: curves.success,
                    precision: curves.precision,
                    norm_precision: curves.norm_precision,
                },
            })
        })
        .collect()
}

/// Reads a results folder for every annotated sequence. A sequence with no
/// result folder is an error.
pub fn read_results(results_dir: &Path, annotations: &[SequenceAnnotation]) -> Result<Vec<SequenceResult>> {
    if !results_dir.is_dir() {
        return Err(Error::data(format!("{} is not a directory", results_dir.display())));
    }
    annotations
        .iter()
        .map(|a| {
            SequenceResult::read(results_dir, &a.name)
                .map_err(|e| Error::data(format!("results for {}: {e}", a.name)))
        })
        .collect()
}

pub fn write_summary(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summaries)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<Summary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let s: Vec<Summary> = serde_json::from_str(&text)?;
    if let Some(bad) = s.iter().find(|s| s.schema_version != SCHEMA_VERSION) {
        return Err(Error::data(format!(
            "{}: summary schema {} (expected {SCHEMA_VERSION})",
            path.display(),
            bad.schema_version
        )));
    }
    Ok(s)
}

/// Runs every sequence in parallel with a fresh tracker from `factory`,
/// writes per-sequence result files under `out_dir`, and returns the
/// results in sequence order.
pub fn run_ope<F>(annotations: &[SequenceAnnotation], factory: F, out_dir: &Path) -> Result<Vec<SequenceResult>>
where
    F: Fn(&SequenceAnnotation) -> Result<Box<dyn PairTracker>> + Sync,
{
    fs::create_dir_all(out_dir)?;
    let results: Vec<SequenceResult> = annotations
        .par_iter()
        .map(|seq| {
            let mut tracker = factory(seq)?;
            let r = run_sequence(tracker.as_mut(), seq)?;
            log::info!("tracked {} ({} frames)", seq.name, seq.len());
            Ok(r)
        })
        .collect::<Result<_>>()?;
    for r in &results {
        r.write(out_dir)?;
    }
    Ok(results)
}

/// Echoes the annotations; the upper bound of every metric.
pub struct OracleTracker {
    rgb: Vec<BBox>,
    sonar: Vec<BBox>,
}

impl OracleTracker {
    pub fn new(seq: &SequenceAnnotation) -> Self {
        Self {
            rgb: seq.rgb_boxes.clone(),
            sonar: seq.sonar_boxes.clone(),
        }
    }
}

impl PairTracker for OracleTracker {
    fn init(&mut self, _frame: &FramePair, _boxes: (BBox, BBox)) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, frame: &FramePair) -> Result<(Prediction, Prediction)> {
        let p = |b: BBox| Prediction {
            bbox: b,
            confidence: if b.is_absent() { 0.0 } else { 1.0 },
        };
        Ok((p(self.rgb[frame.index]), p(self.sonar[frame.index])))
    }
}
