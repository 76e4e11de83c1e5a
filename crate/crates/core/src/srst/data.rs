//! Training-data records: SOT sequence folders and detection annotation files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::annotation::read_boxes;
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::imaging::ImageF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sot,
    Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameRef {
    Path(PathBuf),
    Image(Arc<ImageF32>),
}

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<FrameRef>,
    pub boxes: Vec<BBox>,
    pub source: Source,
}

/// Smallest box side accepted as a training target, in pixels.
const MIN_SIDE: f64 = 1.0;

impl SequenceRecord {
    pub fn new(name: impl Into<String>, frames: Vec<FrameRef>, boxes: Vec<BBox>, source: Source) -> Result<Self> {
        let name = name.into();
        if frames.len() != boxes.len() {
            return Err(Error::data(format!(
                "{name}: {} frames but {} boxes",
                frames.len(),
                boxes.len()
            )));
        }
        if frames.is_empty() {
            return Err(Error::data(format!("{name}: empty sequence")));
        }
        Ok(Self {
            name,
            frames,
            boxes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_valid_frame(&self, i: usize) -> bool {
        let b = &self.boxes[i];
        !b.is_absent() && b.w >= MIN_SIDE && b.h >= MIN_SIDE
    }

    pub fn valid_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_valid_frame(i)).collect()
    }
}

/// Decoded-image cache shared by sampling workers.
#[derive(Debug, Default)]
pub struct FrameCache {
    enabled: bool,
    map: RwLock<HashMap<PathBuf, Arc<ImageF32>>>,
}

impl FrameCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            map: RwLock::default(),
        }
    }

    pub fn load(&self, frame: &FrameRef) -> Result<Arc<ImageF32>> {
        let path = match frame {
            FrameRef::Image(img) => return Ok(img.clone()),
            FrameRef::Path(p) => p,
        };
        if self.enabled {
            if let Some(img) = self.map.read().expect("cache lock").get(path) {
                return Ok(img.clone());
            }
        }
        let img = Arc::new(ImageF32::load(path)?);
        if self.enabled {
            self.map
                .write()
                .expect("cache lock")
                .insert(path.clone(), img.clone());
        }
        Ok(img)
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "png" | "bmp")
    )
}

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads `<root>/<seq>/img/*` plus `<root>/<seq>/groundtruth.txt` for every
/// sequence folder, sorted by name.
pub fn read_sot_root(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_sot_sequence(d)).collect()
}

pub fn read_sot_sequence(dir: &Path) -> Result<SequenceRecord> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let boxes = read_boxes(&dir.join("groundtruth.txt"))?;
    let frames = list_images(&dir.join("img"))?;
    SequenceRecord::new(name, frames.into_iter().map(FrameRef::Path).collect(), boxes, Source::Sot)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
}

/// Detection annotations as single-frame records, one per box. Accepts
/// either a map `{"image path": [[x, y, w, h], ...]}` or a COCO-style file
/// with `images` and `annotations`. Relative paths resolve against the
/// annotation file's directory.
pub fn read_detection_json(path: &Path) -> Result<Vec<SequenceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let per_image: BTreeMap<String, Vec<[f64; 4]>> = if value.get("images").is_some() && value.get("annotations").is_some() {
        let coco: CocoFile = serde_json::from_value(value)?;
        let names: HashMap<u64, &str> = coco.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
        let mut map: BTreeMap<String, Vec<[f64; 4]>> = BTreeMap::new();
        for a in &coco.annotations {
            let name = names
                .get(&a.image_id)
                .ok_or_else(|| Error::data(format!("annotation for unknown image id {}", a.image_id)))?;
            map.entry(name.to_string()).or_default().push(a.bbox);
        }
        map
    } else {
        serde_json::from_value(value)?
    };

    let mut records = Vec::new();
    for (name, boxes) in per_image {
        let img = base.join(&name);
        for (k, b) in boxes.iter().enumerate() {
            let bb = BBox::new(b[0], b[1], b[2], b[3]);
            if bb.validate().is_err() || bb.w < MIN_SIDE || bb.h < MIN_SIDE {
                log::debug!("skipping degenerate box {k} in {name}");
                continue;
            }
            records.push(SequenceRecord::new(
                format!("{name}#{k}"),
                vec![FrameRef::Path(img.clone())],
                vec![bb],
                Source::Detection,
            )?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_lengths_rejected() {
        let f = FrameRef::Image(Arc::new(ImageF32::new(4, 4)));
        assert!(SequenceRecord::new("s", vec![f.clone()], vec![], Source::Sot).is_err());
        assert!(SequenceRecord::new("s", vec![], vec![], Source::Sot).is_err());
        let r = SequenceRecord::new("s", vec![f.clone(), f], vec![BBox::ABSENT, BBox::new(0., 0., 2., 2.)], Source::Sot).unwrap();
        assert_eq!(r.valid_frames(), vec![1]);
    }

    #[test]
    fn detection_map_and_coco_agree() {
        let dir = tempfile::tempdir().unwrap();
        let map = dir.path().join("map.json");
        fs::write(&map, r#"{"a.png": [[1,2,3,4],[5,6,7,8]], "b.png": [[0,0,0,0]]}"#).unwrap();
        let coco = dir.path().join("coco.json");
        fs::write(
            &coco,
            r#"{"images":[{"id":1,"file_name":"a.png"}],
                "annotations":[{"image_id":1,"bbox":[1,2,3,4]},{"image_id":1,"bbox":[5,6,7,8]}]}"#,
        )
        .unwrap();
        let a = read_detection_json(&map).unwrap();
        let b = read_detection_json(&coco).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.boxes, y.boxes);
            assert_eq!(x.len(), 1);
            assert_eq!(x.source, Source::Detection);
        }
    }

    #[test]
    fn sot_folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("seq1");
        fs::create_dir_all(seq.join("img")).unwrap();
        for i in 1..=3 {
            ImageF32::new(8, 8).save(&seq.join(format!("img/{i:06}.png"))).unwrap();
        }
        fs::write(seq.join("groundtruth.txt"), "1,1,2,2\n0,0,0,0\n2,2,3,3\n").unwrap();
        let recs = read_sot_root(dir.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].name, "seq1");
        assert_eq!(recs[0].valid_frames(), vec![0, 2]);
        let cache = FrameCache::new(true);
        let img = cache.load(&recs[0].frames[0]).unwrap();
        assert_eq!(img.width, 8);
    }
}
