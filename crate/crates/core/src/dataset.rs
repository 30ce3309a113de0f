//! Paired-slice dataset handling: normalization, padding, masks, augmentation,
//! and the JSON-lines manifest tying slice files together.

use crate::rng::SeedRng;
use crate::slice_io;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Intensity level above which a pixel counts as foreground (post-normalization).
pub const FOREGROUND_LEVEL: f32 = -0.95;
/// Minimum foreground fraction for a slice to be kept.
pub const FOREGROUND_MIN_FRACTION: f64 = 0.05;

/// One aligned source/target slice pair with an optional binary prior mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub source: Array2<f32>,
    pub target: Array2<f32>,
    pub prior_mask: Option<Array2<u8>>,
    pub subject_id: String,
    pub slice_index: u32,
}

impl SlicePair {
    /// Check shape agreement, value ranges, and mask binariness.
    pub fn validate(&self) -> Result<()> {
        if self.source.dim() != self.target.dim() {
            return Err(Error::dim(
                format!("slice pair {}/{}", self.subject_id, self.slice_index),
                format!("{:?}", self.source.dim()),
                format!("{:?}", self.target.dim()),
            ));
        }
        for (name, img) in [("source", &self.source), ("target", &self.target)] {
            for &v in img.iter() {
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "{name} of {}/{} has value {v} outside [-1, 1]",
                        self.subject_id, self.slice_index
                    )));
                }
            }
        }
        if let Some(mask) = &self.prior_mask {
            if mask.dim() != self.source.dim() {
                return Err(Error::dim(
                    format!("prior mask of {}/{}", self.subject_id, self.slice_index),
                    format!("{:?}", self.source.dim()),
                    format!("{:?}", mask.dim()),
                ));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!(
                    "prior mask of {}/{} is not binary",
                    self.subject_id, self.slice_index
                )));
            }
        }
        Ok(())
    }

    /// Mirror source, target, and mask about the vertical axis together.
    pub fn hflip(&self) -> SlicePair {
        SlicePair {
            source: flip_columns(&self.source),
            target: flip_columns(&self.target),
            prior_mask: self.prior_mask.as_ref().map(flip_columns),
            subject_id: self.subject_id.clone(),
            slice_index: self.slice_index,
        }
    }
}

fn flip_columns<T: Clone>(img: &Array2<T>) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[(y, w - 1 - x)].clone())
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Raw min/max used to normalize a subject, kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub lo: f32,
    pub hi: f32,
}

/// One manifest line: file references plus bookkeeping for a slice pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRecord {
    pub subject_id: String,
    pub slice_index: u32,
    pub split: Split,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub norm: NormRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    kind: String,
    version: u32,
    canvas: (usize, usize),
}

/// Slice-file references grouped with the canvas size and split assignment.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub canvas: (usize, usize),
    pub records: Vec<SliceRecord>,
}

impl DatasetManifest {
    /// Enforce disjoint train/test subject sets.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.subject_id.as_str())
            .collect();
        let test: BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.subject_id.as_str())
            .collect();
        if let Some(shared) = train.intersection(&test).next() {
            return Err(Error::Data(format!(
                "subject `{shared}` appears in both train and test splits"
            )));
        }
        Ok(())
    }

    /// Write as JSON-lines: a header line, then one record per slice.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = ManifestHeader {
            kind: "slice-manifest".into(),
            version: 1,
            canvas: self.canvas,
        };
        out.push_str(&serde_json::to_string(&header).expect("header json"));
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record json"));
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        if header.kind != "slice-manifest" {
            return Err(Error::Data(format!("{}: unknown manifest kind", path.display())));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Json { path: path.into(), source: e })?,
            );
        }
        let manifest = DatasetManifest { canvas: header.canvas, records };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Slices decoded into memory, split by subject.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub canvas: (usize, usize),
    pub train: Vec<SlicePair>,
    pub test: Vec<SlicePair>,
}

/// Load every slice referenced by a manifest, validating shapes and ranges.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in &manifest.records {
        let source = slice_io::read_slice(&base.join(&rec.source))?;
        let target = slice_io::read_slice(&base.join(&rec.target))?;
        let prior_mask = match &rec.mask {
            Some(rel) => {
                let raw = slice_io::read_slice(&base.join(rel))?;
                Some(mask_from_float(&raw)?)
            }
            None => None,
        };
        let pair = SlicePair {
            source,
            target,
            prior_mask,
            subject_id: rec.subject_id.clone(),
            slice_index: rec.slice_index,
        };
        pair.validate()?;
        if pair.source.dim() != manifest.canvas {
            return Err(Error::dim(
                format!("slice {}/{}", rec.subject_id, rec.slice_index),
                format!("{:?}", manifest.canvas),
                format!("{:?}", pair.source.dim()),
            ));
        }
        match rec.split {
            Split::Train => train.push(pair),
            Split::Test => test.push(pair),
        }
    }
    Ok(LoadedDataset { canvas: manifest.canvas, train, test })
}

fn mask_from_float(raw: &Array2<f32>) -> Result<Array2<u8>> {
    let mut out = Array2::<u8>::zeros(raw.dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        *o = if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else {
            return Err(Error::Data(format!("mask value {v} is not 0/1")));
        };
    }
    Ok(out)
}

/// Affine map `[lo, hi]` onto `[-1, 1]`; out-of-range inputs are clipped and
/// counted. Returns the normalized image and the clip count.
pub fn normalize_intensity(raw: &Array2<f32>, lo: f32, hi: f32) -> Result<(Array2<f32>, usize)> {
    if !(hi > lo) {
        return Err(Error::Config(format!("normalization requires hi > lo, got [{lo}, {hi}]")));
    }
    let mut clipped = 0usize;
    let span = hi - lo;
    let out = raw.mapv(|v| {
        let c = if v < lo || v > hi {
            clipped += 1;
            v.clamp(lo, hi)
        } else {
            v
        };
        (2.0 * (c - lo) / span - 1.0).clamp(-1.0, 1.0)
    });
    Ok((out, clipped))
}

/// Invert [`normalize_intensity`] given the stored (lo, hi).
pub fn denormalize_intensity(img: &Array2<f32>, lo: f32, hi: f32) -> Result<Array2<f32>> {
    if !(hi > lo) {
        return Err(Error::Config(format!("denormalization requires hi > lo, got [{lo}, {hi}]")));
    }
    Ok(img.mapv(|v| (v + 1.0) * 0.5 * (hi - lo) + lo))
}

/// Center `img` on `canvas`, filling the border with the image minimum.
pub fn pad_to_canvas(img: &Array2<f32>, canvas: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = img.dim();
    let (ch, cw) = canvas;
    if h > ch || w > cw {
        return Err(Error::dim("pad_to_canvas", format!("<= {ch}x{cw}"), format!("{h}x{w}")));
    }
    let fill = img.iter().cloned().fold(f32::INFINITY, f32::min);
    let fill = if fill.is_finite() { fill } else { 0.0 };
    let mut out = Array2::from_elem(canvas, fill);
    let y0 = (ch - h) / 2;
    let x0 = (cw - w) / 2;
    out.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w]).assign(img);
    Ok(out)
}

/// Center a binary mask on `canvas` with zero fill.
pub fn pad_mask_to_canvas(mask: &Array2<u8>, canvas: (usize, usize)) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    let (ch, cw) = canvas;
    if h > ch || w > cw {
        return Err(Error::dim("pad_mask_to_canvas", format!("<= {ch}x{cw}"), format!("{h}x{w}")));
    }
    let mut out = Array2::zeros(canvas);
    let y0 = (ch - h) / 2;
    let x0 = (cw - w) / 2;
    out.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w]).assign(mask);
    Ok(out)
}

/// Binary mask of pixels at or above `threshold`.
pub fn extract_prior_mask(target: &Array2<f32>, threshold: f32) -> Array2<u8> {
    target.mapv(|v| u8::from(v >= threshold))
}

/// Fraction of pixels above the foreground level.
pub fn foreground_fraction(img: &Array2<f32>) -> f64 {
    let total = img.len().max(1);
    let fg = img.iter().filter(|&&v| v > FOREGROUND_LEVEL).count();
    fg as f64 / total as f64
}

/// With probability `p`, flip source/target/mask together. Always consumes
/// exactly one uniform draw so downstream draw order is independent of `p`.
pub fn augment_hflip(pair: &SlicePair, p: f64, rng: &mut SeedRng) -> SlicePair {
    assert!((0.0..=1.0).contains(&p), "flip probability {p} outside [0,1]");
    let u = rng.uniform();
    if u < p {
        pair.hflip()
    } else {
        pair.clone()
    }
}
