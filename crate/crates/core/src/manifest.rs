//! Per-sample provenance records, stored one JSON object per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distortion::DistortionType;
use crate::error::{Error, Result};
use crate::label::{SoftLabel, SUM_TOLERANCE};

/// Axis-aligned pixel rectangle `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

/// Distortion class of one source; `dtype = None` marks a pristine reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionMeta {
    #[serde(rename = "type", with = "meta_type")]
    pub dtype: Option<DistortionType>,
    pub level: u8,
}

impl DistortionMeta {
    pub const REFERENCE: DistortionMeta = DistortionMeta {
        dtype: None,
        level: 0,
    };

    pub fn distorted(dtype: DistortionType, level: u8) -> Self {
        Self {
            dtype: Some(dtype),
            level,
        }
    }

    pub fn is_reference(&self) -> bool {
        self.dtype.is_none()
    }

    pub fn class_index(&self) -> usize {
        crate::distortion::class_index(self.dtype.map(|t| (t, self.level)))
    }
}

mod meta_type {
    use super::DistortionType;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<DistortionType>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(t.map_or("reference", |t| t.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DistortionType>, D::Error> {
        let name = String::deserialize(d)?;
        if name == "reference" {
            return Ok(None);
        }
        name.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub sample_id: String,
    pub source_ids: Vec<String>,
    pub mask_rects: Vec<Rect>,
    pub lambdas: Vec<f64>,
    pub label: SoftLabel,
    pub seed: u64,
    pub distortion_meta: Vec<DistortionMeta>,
}

impl SampleManifest {
    /// Checks the record against the image size it describes.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let n = self.source_ids.len();
        if n == 0 {
            return Err(Error::validation(format!("{}: no sources", self.sample_id)));
        }
        if self.lambdas.len() != n || self.distortion_meta.len() != n {
            return Err(Error::validation(format!(
                "{}: {} sources, {} lambdas, {} distortion entries",
                self.sample_id,
                n,
                self.lambdas.len(),
                self.distortion_meta.len()
            )));
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE || self.lambdas.iter().any(|l| *l < 0.0) {
            return Err(Error::validation(format!(
                "{}: lambdas sum to {sum}",
                self.sample_id
            )));
        }
        if let Some(r) = self.mask_rects.iter().find(|r| !r.fits(width, height)) {
            return Err(Error::validation(format!(
                "{}: rect {:?} outside {width}x{height}",
                self.sample_id, r
            )));
        }
        Ok(())
    }

    /// The pristine-reference flag used to gate distillation.
    pub fn is_reference(&self) -> bool {
        self.distortion_meta.iter().all(DistortionMeta::is_reference)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleManifest]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleManifest>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}
