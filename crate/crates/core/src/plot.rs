//! Minimal raster plots written as binary PPM: grouped histograms, scatter
//! plots and image strips. No text rendering; groups are identified by a
//! colour legend of swatches in the top-left corner, in group order.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::image::{write_pgm, write_ppm, GrayImage};

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const WHITE: Rgb = [255, 255, 255];
const AXIS: Rgb = [60, 60, 60];
const MARGIN: usize = 24;

pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: WHITE.repeat(width * height),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    pub fn dot(&mut self, x: i64, y: i64, r: i64, c: Rgb) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    fn axes(&mut self) {
        let (w, h, m) = (self.width as i64, self.height as i64, MARGIN as i64);
        self.fill_rect(m, h - m, w - m / 2, h - m + 1, AXIS);
        self.fill_rect(m - 1, m / 2, m, h - m, AXIS);
    }

    fn legend(&mut self, n: usize) {
        for i in 0..n {
            let x = MARGIN as i64 + 6 + 14 * i as i64;
            self.fill_rect(x, 4, x + 10, 14, PALETTE[i % PALETTE.len()]);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_ppm(path, self.width, self.height, &self.rgb)
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo, hi))
}

/// Side-by-side bars per bin, one colour per group, heights as fractions of
/// each group's size so groups of different sizes compare directly.
pub fn histogram(groups: &[Vec<f64>], bins: usize, path: &Path) -> Result<()> {
    if groups.is_empty() || bins == 0 {
        return Err(invalid("histogram needs at least one group and one bin"));
    }
    let (lo, hi) = finite_range(groups.iter().flatten().copied()).ok_or_else(|| invalid("histogram has no finite values"))?;
    let (w, h) = (480usize, 240usize);
    let mut r = Raster::new(w, h);
    let plot_w = (w - MARGIN - MARGIN / 2) as f64;
    let plot_h = (h - 2 * MARGIN) as f64;
    let bin_w = plot_w / bins as f64;
    let bar_w = bin_w / groups.len() as f64;
    for (gi, g) in groups.iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for &v in g.iter().filter(|v| v.is_finite()) {
            let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let n = g.len().max(1) as f64;
        for (b, &c) in counts.iter().enumerate() {
            let x0 = MARGIN as f64 + b as f64 * bin_w + gi as f64 * bar_w;
            let top = (h - MARGIN) as f64 - plot_h * c as f64 / n;
            r.fill_rect(x0 as i64, top as i64, (x0 + bar_w).ceil() as i64, (h - MARGIN) as i64, PALETTE[gi % PALETTE.len()]);
        }
    }
    r.axes();
    r.legend(groups.len());
    r.save(path)
}

/// Scatter of `(x, y, group)` points.
pub fn scatter(points: &[(f64, f64, usize)], path: &Path) -> Result<()> {
    let (x_lo, x_hi) = finite_range(points.iter().map(|p| p.0)).ok_or_else(|| invalid("scatter has no finite points"))?;
    let (y_lo, y_hi) = finite_range(points.iter().map(|p| p.1)).ok_or_else(|| invalid("scatter has no finite points"))?;
    let (w, h) = (400usize, 400usize);
    let mut r = Raster::new(w, h);
    let pw = (w - MARGIN - MARGIN) as f64;
    let ph = (h - MARGIN - MARGIN) as f64;
    for &(x, y, g) in points {
        let px = MARGIN as f64 + 4.0 + (pw - 8.0) * (x - x_lo) / (x_hi - x_lo);
        let py = (h - MARGIN) as f64 - 4.0 - (ph - 8.0) * (y - y_lo) / (y_hi - y_lo);
        r.dot(px as i64, py as i64, 2, PALETTE[g % PALETTE.len()]);
    }
    let groups = points.iter().map(|p| p.2 + 1).max().unwrap_or(0);
    r.axes();
    r.legend(groups);
    r.save(path)
}

/// Frames side by side with a 2 px white gap, as grayscale PGM.
pub fn image_strip(frames: &[GrayImage], path: &Path) -> Result<()> {
    let first = frames.first().ok_or_else(|| invalid("image strip needs at least one frame"))?;
    let (fw, fh) = (first.width, first.height);
    if frames.iter().any(|f| (f.width, f.height) != (fw, fh)) {
        return Err(invalid("image strip frames must share one size"));
    }
    let gap = 2;
    let width = frames.len() * fw + (frames.len() - 1) * gap;
    let mut out = GrayImage::filled(width, fh, 1.0);
    for (i, f) in frames.iter().enumerate() {
        for y in 0..fh {
            for x in 0..fw {
                out.set(i * (fw + gap) + x, y, f.at(x, y));
            }
        }
    }
    write_pgm(path, &out)
}
