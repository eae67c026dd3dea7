//! Minimal line charts rendered straight to PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

pub struct Series {
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

struct Raster {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Raster {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let p = (y as usize * self.w + x as usize) * 3;
            self.rgb[p..p + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            self.put(x0, y0 + 1, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Moving average over a trailing window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (k, &v) in values.iter().enumerate() {
        sum += v;
        if k >= window {
            sum -= values[k - window];
        }
        out.push(sum / (k + 1).min(window) as f64);
    }
    out
}

/// Draws all series on shared axes with light gridlines; no text.
pub fn line_chart(path: &Path, series: &[Series], width: usize, height: usize) -> Result<()> {
    let mut r = Raster {
        w: width,
        h: height,
        rgb: vec![255; width * height * 3],
    };
    let margin = 24i64;
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_lo > x_hi {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let (pw, ph) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let to_px = |x: f64, y: f64| {
        (
            margin + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64,
            margin + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64).round() as i64,
        )
    };
    for k in 0..=4 {
        let y = margin + ph * k / 4;
        r.line((margin, y), (margin + pw, y), [225, 225, 225]);
    }
    r.line((margin, margin), (margin, margin + ph), [0, 0, 0]);
    r.line((margin, margin + ph), (margin + pw, margin + ph), [0, 0, 0]);
    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                prev = None;
                continue;
            }
            let p = to_px(x, y);
            match prev {
                Some(q) => r.line(q, p, s.color),
                None => r.put(p.0, p.1, s.color),
            }
            prev = Some(p);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let ctx = |e: png::EncodingError| Error::io(format!("writing {}", path.display()), e.into());
    enc.write_header()
        .map_err(ctx)?
        .write_image_data(&r.rgb)
        .map_err(ctx)
}
