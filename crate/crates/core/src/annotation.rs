//! `x,y,w,h` box text files: one line per frame, `0,0,0,0` for absence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::boxgeom::BBox;
use crate::error::{Error, Result};

/// Parses one line; commas, tabs and spaces are all accepted as separators.
pub fn parse_box_line(line: &str) -> Result<BBox> {
    let vals: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::data(format!("bad box value {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != 4 {
        return Err(Error::data(format!("expected 4 values, got {line:?}")));
    }
    let b = BBox::new(vals[0], vals[1], vals[2], vals[3]);
    b.validate().map_err(|_| Error::data(format!("invalid box {line:?}")))?;
    Ok(b)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_box_line(l).map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Shortest round-trip formatting, so written boxes parse back bit-exactly.
pub fn format_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut out = String::with_capacity(boxes.len() * 24);
    for b in boxes {
        let _ = writeln!(out, "{}", format_box(b));
    }
    fs::write(path, out)?;
    Ok(())
}
