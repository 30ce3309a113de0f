//! Slice storage: a small raw float format plus grayscale PNG previews.
//!
//! The raw format is the canonical interchange for slices: magic `FGSB`,
//! little-endian u32 height, u32 width, then row-major little-endian f32
//! samples. PNGs are 16-bit grayscale and intended for inspection; the raw
//! files are what training and evaluation read back.

use crate::{Error, Result};
use ndarray::Array2;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const SLICE_MAGIC: &[u8; 4] = b"FGSB";

/// Write a slice in the raw float format.
pub fn write_slice(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = Vec::with_capacity(12 + 4 * h * w);
    buf.extend_from_slice(SLICE_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for row in img.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a slice in the raw float format.
pub fn read_slice(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SLICE_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a raw slice file (bad magic or truncated header)",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + 4 * h * w;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "{}: payload length {} does not match {h}x{w} header",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write a 16-bit grayscale PNG preview, mapping `[lo, hi]` to the full range.
pub fn write_gray_png(path: &Path, img: &Array2<f32>, lo: f32, hi: f32) -> Result<()> {
    if !(hi > lo) {
        return Err(Error::Config(format!("png range requires hi > lo, got [{lo}, {hi}]")));
    }
    let (h, w) = img.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (y, row) in img.rows().into_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            buf.put_pixel(x as u32, y as u32, image::Luma([(t * 65535.0).round() as u16]));
        }
    }
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fgsb");
        let img = Array2::from_shape_fn((5, 7), |(y, x)| (y as f32 * 0.31 - x as f32 * 0.17).sin());
        write_slice(&path, &img).unwrap();
        let back = read_slice(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fgsb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_slice(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fgsb");
        let img = Array2::<f32>::zeros((4, 4));
        write_slice(&path, &img).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_slice(&path).is_err());
    }
}
