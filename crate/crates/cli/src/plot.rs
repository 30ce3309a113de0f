//! Dependency-free PNG plotting: line charts and image comparison grids.

use std::path::Path;

use fgsb_core::{Error, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;

// ── 5x7 bitmap font ────────────────────────────────────────────────────────

const GLYPH_W: i64 = 5;
const GLYPH_H: i64 = 7;
/// Horizontal advance per character (glyph plus 1px gap).
pub const CHAR_W: i64 = GLYPH_W + 1;

/// Row bitmaps (bit 4 = leftmost pixel) for one character; lowercase maps to
/// uppercase, unknown characters render blank.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00, 0x00],
        _ => [0x00; 7],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Render `text` with its top-left corner at (x, y).
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let cx = x + i as i64 * CHAR_W;
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row >> (GLYPH_W - 1 - dx) & 1 == 1 {
                    put(img, cx + dx, y + dy as i64, color);
                }
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

// ── line charts ────────────────────────────────────────────────────────────

/// One named trace of a line chart, indexed 0..len on the x axis.
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [23, 190, 207],
    [127, 127, 127],
];

const BLACK: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [220, 220, 220];

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".into()
    } else if !(0.01..10000.0).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Draw indexed series as polylines with axes, ticks and a legend, and write
/// the chart as a PNG.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    series: &[Series],
    width: u32,
    height: u32,
) -> Result<()> {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if n == 0 || finite.is_empty() {
        return Err(Error::Data(format!("chart `{title}` has no finite points to plot")));
    }
    let (mut lo, mut hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        lo -= pad;
        hi += pad;
    }
    let span = hi - lo;
    lo -= 0.05 * span;
    hi += 0.05 * span;

    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (px0, px1) = (56i64, width as i64 - 14);
    let (py0, py1) = (22i64, height as i64 - 34);
    if px1 <= px0 + 1 || py1 <= py0 + 1 {
        return Err(Error::Config(format!("chart size {width}x{height} is too small")));
    }

    let x_at = |i: usize| {
        if n <= 1 {
            (px0 + px1) / 2
        } else {
            px0 + ((px1 - px0) as f64 * i as f64 / (n - 1) as f64).round() as i64
        }
    };
    let y_at = |v: f64| py1 - (((v - lo) / (hi - lo)) * (py1 - py0) as f64).round() as i64;

    // Gridlines and tick labels.
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        draw_line(&mut img, px0, y, px1, y, GRID);
        let label = fmt_tick(v);
        draw_text(&mut img, px0 - 4 - label.len() as i64 * CHAR_W, y - 3, &label, BLACK);
    }
    for k in 0..=4 {
        let i = (n - 1) * k / 4;
        let x = x_at(i);
        draw_line(&mut img, x, py0, x, py1, GRID);
        let label = format!("{i}");
        draw_text(&mut img, x - label.len() as i64 * CHAR_W / 2, py1 + 4, &label, BLACK);
    }
    draw_line(&mut img, px0, py0, px0, py1, BLACK);
    draw_line(&mut img, px0, py1, px1, py1, BLACK);

    // Traces; non-finite points break the polyline.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let pt = (x_at(i), y_at(v).clamp(py0, py1));
            if let Some((x0, y0)) = prev {
                draw_line(&mut img, x0, y0, pt.0, pt.1, color);
            }
            prev = Some(pt);
        }
    }

    draw_text(&mut img, 4, 6, title, BLACK);
    let xl_x = (px0 + px1) / 2 - x_label.len() as i64 * CHAR_W / 2;
    draw_text(&mut img, xl_x, py1 + 16, x_label, BLACK);

    // Legend, right-aligned in the title row.
    let mut lx = width as i64 - 8;
    for (si, s) in series.iter().enumerate().rev() {
        lx -= s.label.len() as i64 * CHAR_W + 14;
        let color = PALETTE[si % PALETTE.len()];
        for dy in 0..7 {
            draw_line(&mut img, lx, 6 + dy, lx + 8, 6 + dy, color);
        }
        draw_text(&mut img, lx + 11, 6, &s.label, BLACK);
    }

    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

// ── comparison grids ───────────────────────────────────────────────────────

const CELL_GAP: i64 = 4;
const HEADER_H: i64 = 14;

/// Tile rows of same-sized images (values in [0, 1]) into a labeled grid PNG;
/// one column label per image column, one row label at the left of each row.
pub fn comparison_grid(
    path: &Path,
    col_labels: &[&str],
    rows: &[(String, Vec<Array2<f64>>)],
) -> Result<()> {
    let Some((_, first)) = rows.first() else {
        return Err(Error::Data("comparison grid needs at least one row".into()));
    };
    if first.len() != col_labels.len() {
        return Err(Error::dim("comparison grid columns", col_labels.len(), first.len()));
    }
    let (h, w) = first[0].dim();
    for (label, images) in rows {
        if images.len() != col_labels.len() {
            return Err(Error::dim(format!("grid row {label}"), col_labels.len(), images.len()));
        }
        for img in images {
            if img.dim() != (h, w) {
                return Err(Error::dim(
                    format!("grid row {label}"),
                    format!("{h}x{w}"),
                    format!("{}x{}", img.dim().0, img.dim().1),
                ));
            }
        }
    }

    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0) as i64 * CHAR_W + 8;
    let cols = col_labels.len() as i64;
    let width = label_w + cols * (w as i64 + CELL_GAP);
    let height = HEADER_H + rows.len() as i64 * (h as i64 + CELL_GAP);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));

    for (c, label) in col_labels.iter().enumerate() {
        let x = label_w + c as i64 * (w as i64 + CELL_GAP);
        draw_text(&mut img, x + (w as i64 - label.len() as i64 * CHAR_W) / 2, 3, label, BLACK);
    }
    for (r, (label, images)) in rows.iter().enumerate() {
        let y0 = HEADER_H + r as i64 * (h as i64 + CELL_GAP);
        draw_text(&mut img, 4, y0 + (h as i64 - GLYPH_H) / 2, label, BLACK);
        for (c, tile) in images.iter().enumerate() {
            let x0 = label_w + c as i64 * (w as i64 + CELL_GAP);
            for ((y, x), &v) in tile.indexed_iter() {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                put(&mut img, x0 + x as i64, y0 + y as i64, [g, g, g]);
            }
        }
    }

    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
