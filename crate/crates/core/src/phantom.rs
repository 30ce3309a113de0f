//! Synthetic paired-modality phantom: elliptical tissue layouts whose target
//! modality is a fixed monotone intensity remap of the source plus bright
//! lesion blobs that exist only in the target, with matching prior masks.
//!
//! The phantom is the desk-scale stand-in for real paired cohorts: it gives a
//! ground-truth pixel correspondence (the remap), target-exclusive structure
//! (the lesions), and a deterministic train/test split by subject.

use crate::dataset::{
    DatasetManifest, NormRecord, SlicePair, SliceRecord, Split, FOREGROUND_MIN_FRACTION,
};
use crate::rng::{stream, SeedRng};
use crate::slice_io;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Monotone source→target remap exponent.
pub const REMAP_EXPONENT: f32 = 0.6;
/// Peak intensity of injected lesion blobs.
pub const LESION_PEAK: f32 = 0.9;
/// Gaussian weight cutoff defining a lesion's footprint (and its mask).
pub const LESION_WEIGHT_MIN: f32 = 0.05;
/// Intensity threshold that separates lesion-bright tissue in the target.
pub const LESION_THRESHOLD: f32 = 0.6;

/// Phantom dataset shape and randomness knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub subjects: usize,
    pub slices_per_subject: usize,
    pub canvas: usize,
    /// Probability that a slice receives lesions.
    pub lesion_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            subjects: 2,
            slices_per_subject: 100,
            canvas: 64,
            lesion_rate: 0.7,
            seed: 17,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 1 {
            return Err(Error::Config("phantom needs at least 1 subject".into()));
        }
        if self.slices_per_subject < 1 {
            return Err(Error::Config("phantom needs at least 1 slice per subject".into()));
        }
        if self.canvas < 16 {
            return Err(Error::Config("phantom canvas must be at least 16".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_rate) {
            return Err(Error::Config(format!(
                "lesion_rate {} outside [0, 1]",
                self.lesion_rate
            )));
        }
        Ok(())
    }

    /// Number of held-out subjects: one in five, at least one once there are
    /// two or more subjects.
    pub fn test_subjects(&self) -> usize {
        if self.subjects < 2 {
            0
        } else {
            ((self.subjects as f64 / 5.0).round() as usize).max(1)
        }
    }
}

/// The fixed monotone target remap `t = 2*((s+1)/2)^0.6 - 1`.
pub fn phantom_remap(s: f32) -> f32 {
    let u = ((s + 1.0) * 0.5).clamp(0.0, 1.0);
    2.0 * u.powf(REMAP_EXPONENT) - 1.0
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    cos_t: f32,
    sin_t: f32,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    fn radius(&self, x: f32, y: f32) -> f32 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Soft inside-membership with an edge about `soft` pixels wide.
    fn membership(&self, x: f32, y: f32, soft: f32) -> f32 {
        let r = self.radius(x, y);
        let scale = self.a.min(self.b).max(1.0);
        ((1.0 - r) * scale / soft + 0.5).clamp(0.0, 1.0)
    }

    fn scaled(&self, f: f32) -> Ellipse {
        Ellipse { a: self.a * f, b: self.b * f, ..*self }
    }
}

struct SubjectAnatomy {
    outer: Ellipse,
    shell_ratio: f32,
    deep_ratio: f32,
    vent_ratio: f32,
    shell_level: f32,
    cortex_level: f32,
    deep_level: f32,
    vent_level: f32,
    tex_waves: Vec<(f32, f32, f32, f32, f32)>, // (amp, kx, ky, phase_x, phase_y)
}

fn subject_anatomy(cfg: &PhantomConfig, subject: usize) -> SubjectAnatomy {
    let mut rng = SeedRng::derive(cfg.seed, stream::PHANTOM, &[subject as u64]);
    let n = cfg.canvas as f32;
    let outer = Ellipse {
        cx: n * (0.5 + rng.range(-0.03, 0.03) as f32),
        cy: n * (0.5 + rng.range(-0.03, 0.03) as f32),
        a: n * rng.range(0.34, 0.40) as f32,
        b: n * rng.range(0.38, 0.45) as f32,
        cos_t: 0.0,
        sin_t: 0.0,
    };
    let theta = rng.range(-0.3, 0.3) as f32;
    let outer = Ellipse { cos_t: theta.cos(), sin_t: theta.sin(), ..outer };
    let shell_ratio = rng.range(0.84, 0.88) as f32;
    let deep_ratio = rng.range(0.44, 0.52) as f32;
    let vent_ratio = rng.range(0.14, 0.19) as f32;
    let shell_level = rng.range(0.32, 0.40) as f32;
    let cortex_level = rng.range(0.06, 0.14) as f32;
    let deep_level = rng.range(0.52, 0.58) as f32;
    let vent_level = rng.range(-0.60, -0.50) as f32;
    let mut tex_waves = Vec::new();
    for _ in 0..3 {
        tex_waves.push((
            rng.range(0.015, 0.04) as f32,
            rng.range(1.0, 3.0) as f32 * std::f32::consts::TAU / n,
            rng.range(1.0, 3.0) as f32 * std::f32::consts::TAU / n,
            rng.range(0.0, std::f64::consts::TAU) as f32,
            rng.range(0.0, std::f64::consts::TAU) as f32,
        ));
    }
    SubjectAnatomy {
        outer,
        shell_ratio,
        deep_ratio,
        vent_ratio,
        shell_level,
        cortex_level,
        deep_level,
        vent_level,
        tex_waves,
    }
}

fn mix(a: f32, b: f32, m: f32) -> f32 {
    a + (b - a) * m
}

/// Build one slice pair. Lesions are injected into the target only, inside the
/// cortex band between the deep and shell ellipses, and the prior mask marks
/// exactly the pixels whose target value was altered.
fn generate_slice(cfg: &PhantomConfig, anatomy: &SubjectAnatomy, subject: usize, slice: usize) -> SlicePair {
    let mut rng = SeedRng::derive(cfg.seed, stream::PHANTOM, &[subject as u64, slice as u64 + 1]);
    let n = cfg.canvas;
    let nf = n as f32;

    // Slice through an ellipsoid: axes shrink toward the stack ends.
    let z = (slice as f32 + 0.5) / cfg.slices_per_subject as f32;
    let profile = (1.0 - ((z - 0.5) / 0.58).powi(2)).max(0.18).sqrt();
    let jitter = 1.0 + rng.range(-0.01, 0.01) as f32;
    let dx = rng.range(-0.5, 0.5) as f32;
    let dy = rng.range(-0.5, 0.5) as f32;

    let outer = Ellipse {
        cx: anatomy.outer.cx + dx,
        cy: anatomy.outer.cy + dy,
        a: (anatomy.outer.a * profile * jitter).max(3.0),
        b: (anatomy.outer.b * profile * jitter).max(3.0),
        ..anatomy.outer
    };
    let shell = outer.scaled(anatomy.shell_ratio);
    let deep = outer.scaled(anatomy.deep_ratio);
    let vent = outer.scaled(anatomy.vent_ratio);

    let soft = 1.5;
    let mut source = Array2::<f32>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32, y as f32);
            let m_outer = outer.membership(xf, yf, soft);
            let m_shell = shell.membership(xf, yf, soft);
            let m_deep = deep.membership(xf, yf, soft);
            let m_vent = vent.membership(xf, yf, soft);
            let mut v = -1.0;
            v = mix(v, anatomy.shell_level, m_outer);
            v = mix(v, anatomy.cortex_level, m_shell);
            v = mix(v, anatomy.deep_level, m_deep);
            v = mix(v, anatomy.vent_level, m_vent);
            let mut tex = 0.0;
            for &(amp, kx, ky, px, py) in &anatomy.tex_waves {
                tex += amp * (kx * xf + px).cos() * (ky * yf + py).cos();
            }
            v += tex * m_outer;
            source[(y, x)] = v.clamp(-1.0, 1.0);
        }
    }

    let mut target = source.mapv(phantom_remap);
    let mut mask = Array2::<u8>::zeros((n, n));

    let lesioned = rng.uniform() < cfg.lesion_rate;
    if lesioned {
        let count = 1 + rng.below(4);
        for _ in 0..count {
            // Place in the cortex band: radial fraction between the deep and
            // shell boundaries of the outer ellipse.
            let phi = rng.range(0.0, std::f64::consts::TAU) as f32;
            let rfrac = rng.range(
                (anatomy.deep_ratio * 1.1) as f64,
                (anatomy.shell_ratio * 0.85) as f64,
            ) as f32;
            let (cu, cv) = (rfrac * outer.a * phi.cos(), rfrac * outer.b * phi.sin());
            let cx = outer.cx + cu * outer.cos_t - cv * outer.sin_t;
            let cy = outer.cy + cu * outer.sin_t + cv * outer.cos_t;
            let sigma = rng.range(1.0, 1.9) as f32 * nf / 64.0;
            let reach = sigma * (-2.0 * LESION_WEIGHT_MIN.ln()).sqrt();
            let y_lo = ((cy - reach).floor().max(0.0)) as usize;
            let y_hi = ((cy + reach).ceil() as usize).min(n - 1);
            let x_lo = ((cx - reach).floor().max(0.0)) as usize;
            let x_hi = ((cx + reach).ceil() as usize).min(n - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let w = (-d2 / (2.0 * sigma * sigma)).exp();
                    if w >= LESION_WEIGHT_MIN {
                        let t = target[(y, x)];
                        target[(y, x)] = (t + w * (LESION_PEAK - t)).clamp(-1.0, 1.0);
                        mask[(y, x)] = 1;
                    }
                }
            }
        }
    }

    SlicePair {
        source,
        target,
        prior_mask: Some(mask),
        subject_id: format!("phantom{subject:02}"),
        slice_index: slice as u32,
    }
}

/// Generate the full phantom in memory together with its split assignment.
/// The last `test_subjects()` subjects are held out.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Vec<(SlicePair, Split)>> {
    cfg.validate()?;
    let n_test = cfg.test_subjects();
    let mut out = Vec::with_capacity(cfg.subjects * cfg.slices_per_subject);
    for subject in 0..cfg.subjects {
        let anatomy = subject_anatomy(cfg, subject);
        let split = if subject >= cfg.subjects - n_test { Split::Test } else { Split::Train };
        for slice in 0..cfg.slices_per_subject {
            let pair = generate_slice(cfg, &anatomy, subject, slice);
            if crate::dataset::foreground_fraction(&pair.source) < FOREGROUND_MIN_FRACTION {
                continue;
            }
            pair.validate()?;
            out.push((pair, split));
        }
    }
    if out.is_empty() {
        return Err(Error::Data("phantom generation produced no foreground slices".into()));
    }
    Ok(out)
}

/// Write the phantom to disk (raw slices + manifest); returns the manifest path.
pub fn write_phantom_dataset(dir: &Path, cfg: &PhantomConfig) -> Result<PathBuf> {
    let pairs = generate_phantom(cfg)?;
    let slice_dir = dir.join("slices");
    std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
    let mut records = Vec::with_capacity(pairs.len());
    for (pair, split) in &pairs {
        let stem = format!("{}_{:04}", pair.subject_id, pair.slice_index);
        let source_rel = format!("slices/{stem}_src.fgsb");
        let target_rel = format!("slices/{stem}_tgt.fgsb");
        slice_io::write_slice(&dir.join(&source_rel), &pair.source)?;
        slice_io::write_slice(&dir.join(&target_rel), &pair.target)?;
        let mask_rel = match &pair.prior_mask {
            Some(mask) => {
                let rel = format!("slices/{stem}_msk.fgsb");
                slice_io::write_slice(&dir.join(&rel), &mask.mapv(|m| m as f32))?;
                Some(rel)
            }
            None => None,
        };
        records.push(SliceRecord {
            subject_id: pair.subject_id.clone(),
            slice_index: pair.slice_index,
            split: *split,
            source: source_rel,
            target: target_rel,
            mask: mask_rel,
            norm: NormRecord { lo: -1.0, hi: 1.0 },
        });
    }
    let manifest = DatasetManifest { canvas: (cfg.canvas, cfg.canvas), records };
    manifest.validate()?;
    let manifest_path = dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}
