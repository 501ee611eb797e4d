//! Text formats for ground truth and detections.
//!
//! One box per line, whitespace delimited:
//!
//! ```text
//! # image_id category x1 y1 x2 y2 [confidence]
//! img_001 0 10.0 12.5 40.0 60.0 0.93
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use super::{BBox, Detection, GroundTruth};
use crate::error::{Error, Result};

fn records(text: &str, fields: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>)>> {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != fields {
            return Some(Err(Error::parse(
                i + 1,
                format!("expected {fields} fields, found {}", cols.len()),
            )));
        }
        Some(Ok((i + 1, cols)))
    })
}

fn number(line: usize, name: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::parse(line, format!("{name} `{s}` is not a number")))
}

fn entry(line: usize, cols: &[&str]) -> Result<(String, u32, BBox)> {
    let category = cols[1].parse::<u32>().map_err(|_| {
        Error::parse(
            line,
            format!("category `{}` is not a non-negative integer", cols[1]),
        )
    })?;
    let x1 = number(line, "x1", cols[2])?;
    let y1 = number(line, "y1", cols[3])?;
    let x2 = number(line, "x2", cols[4])?;
    let y2 = number(line, "y2", cols[5])?;
    let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::parse(line, e))?;
    Ok((cols[0].to_string(), category, bbox))
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>> {
    records(text, 6)
        .map(|r| {
            let (line, cols) = r?;
            let (image_id, category, bbox) = entry(line, &cols)?;
            Ok(GroundTruth {
                image_id,
                category,
                bbox,
            })
        })
        .collect()
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    records(text, 7)
        .map(|r| {
            let (line, cols) = r?;
            let (image_id, category, bbox) = entry(line, &cols)?;
            let confidence = number(line, "confidence", cols[6])?;
            Detection::new(image_id, category, bbox, confidence).map_err(|e| Error::parse(line, e))
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    parse_ground_truth(&read(path.as_ref())?)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    parse_detections(&read(path.as_ref())?)
}
