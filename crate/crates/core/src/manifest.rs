//! JSON-lines file formats.
//!
//! Dataset manifest, one record per line:
//!
//! ```json
//! {"image": "day_train/0000.png", "boxes": [[x1, y1, x2, y2, class], ...]}
//! ```
//!
//! Relative image paths resolve against the manifest's directory. An image's
//! id is its file stem.
//!
//! Prediction dump, one record per line:
//!
//! ```json
//! {"image_id": "0000", "boxes": [[x1, y1, x2, y2, class], ...], "scores": [...]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub boxes: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub boxes: Vec<[f64; 5]>,
    pub scores: Vec<f64>,
}

/// A resolved manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    pub gt: BoxSet,
}

pub fn boxes_to_rows(set: &BoxSet) -> Vec<[f64; 5]> {
    set.boxes
        .iter()
        .zip(&set.classes)
        .map(|(b, &c)| [b.x1, b.y1, b.x2, b.y2, c as f64])
        .collect()
}

pub fn rows_to_boxes(rows: &[[f64; 5]], scores: Option<Vec<f64>>) -> Result<BoxSet> {
    let mut boxes = Vec::with_capacity(rows.len());
    let mut classes = Vec::with_capacity(rows.len());
    for r in rows {
        let class = r[4];
        if !(class >= 0.0 && class.fract() == 0.0 && class <= u32::MAX as f64) {
            return Err(Error::Data(format!("class must be a non-negative integer, got {class}")));
        }
        boxes.push(BBox::new(r[0], r[1], r[2], r[3]).map_err(|e| Error::Data(e.to_string()))?);
        classes.push(class as u32);
    }
    let set = BoxSet { boxes, classes, scores };
    set.validate().map_err(|e| Error::Data(e.to_string()))?;
    Ok(set)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    read_lines::<ManifestRecord>(path)?
        .into_iter()
        .map(|r| {
            let p = PathBuf::from(&r.image);
            let resolved = if p.is_absolute() { p } else { base.join(p) };
            Ok(Sample {
                id: image_id(&resolved),
                gt: rows_to_boxes(&r.boxes, None)?,
                path: resolved,
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    write_lines(path.as_ref(), records)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, BoxSet>> {
    let mut out = BTreeMap::new();
    for r in read_lines::<PredictionRecord>(path.as_ref())? {
        let set = rows_to_boxes(&r.boxes, Some(r.scores))?;
        if out.insert(r.image_id.clone(), set).is_some() {
            return Err(Error::Data(format!("duplicate image_id '{}' in prediction dump", r.image_id)));
        }
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[(String, BoxSet)]) -> Result<()> {
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|(id, set)| PredictionRecord {
            image_id: id.clone(),
            boxes: boxes_to_rows(set),
            scores: set.scores.clone().unwrap_or_else(|| vec![1.0; set.len()]),
        })
        .collect();
    write_lines(path.as_ref(), &records)
}
