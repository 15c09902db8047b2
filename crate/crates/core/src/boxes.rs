//! Axis-aligned per-slice boxes and their JSON-lines records.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionBox {
    pub slice: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl LesionBox {
    pub fn new(slice: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            slice,
            x1,
            y1,
            x2,
            y2,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

/// Intersection over union; 0 for disjoint boxes. Slices are ignored.
pub fn iou(a: &LesionBox, b: &LesionBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One line of a box file. Ground truth omits `score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub volume_id: String,
    pub slice: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn from_box(volume_id: &str, b: &LesionBox, with_score: bool) -> Self {
        Self {
            volume_id: volume_id.to_string(),
            slice: b.slice,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            score: with_score.then_some(b.score),
        }
    }

    pub fn to_box(&self) -> LesionBox {
        LesionBox {
            slice: self.slice,
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            score: self.score.unwrap_or(1.0),
        }
    }
}

pub fn write_jsonl(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: BoxRecord = serde_json::from_str(l)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if !r.to_box().is_valid() {
                return Err(Error::format(path, format!("line {}: degenerate box", i + 1)));
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = LesionBox::new(0, 0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &LesionBox::new(0, 5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &LesionBox::new(0, 2.0, 0.0, 3.0, 2.0)), 0.0);
        let b = LesionBox::new(0, 1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.jsonl");
        let recs = vec![
            BoxRecord::from_box("v0", &LesionBox::new(3, 1.0, 2.0, 4.5, 6.0), false),
            BoxRecord::from_box("v1", &LesionBox::new(0, 0.0, 0.0, 1.0, 1.0).with_score(0.25), true),
        ];
        write_jsonl(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(!text.lines().next().unwrap().contains("score"));
        assert_eq!(read_jsonl(&p).unwrap(), recs);

        fs::write(&p, "{\"volume_id\":\"v\",\"slice\":0,\"x1\":1,\"y1\":0,\"x2\":1,\"y2\":2}\n").unwrap();
        assert!(matches!(read_jsonl(&p), Err(Error::Format { .. })));
    }
}
