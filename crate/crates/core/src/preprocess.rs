//! Aspect-preserving letterbox resize and the matching ROI remap.
//!
//! Coordinates are continuous with pixel `i` covering `[i, i+1)`, so a pixel
//! centre sits at `i + 0.5`. The forward map is `x' = s·x + Δx`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::GrayImage;

/// Minimum side, in canvas pixels, for a box to survive remapping.
pub const MIN_ROI_SIDE: f64 = 2.0;

/// Model input size. Both sides must be multiples of 16 so four stride-2
/// stages invert exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub const DESK: Canvas = Canvas { width: 160, height: 112 };

    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 16 || height < 16 || width % 16 != 0 || height % 16 != 0 {
            return Err(invalid(format!(
                "canvas {}x{} must be at least 16x16 with both sides divisible by 16",
                width, height
            )));
        }
        Ok(Self { width, height })
    }

    /// Parses `WxH`.
    pub fn parse(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| invalid(format!("canvas `{s}` is not WxH")))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("canvas `{s}` is not WxH")));
        Self::new(num(w)?, num(h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1 < x2 && y1 < y2) || b.area() < 1.0 {
            return Err(invalid(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn full(canvas: Canvas) -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: canvas.width as f64,
            y2: canvas.height as f64,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clipped(&self, canvas: Canvas) -> Self {
        let (w, h) = (canvas.width as f64, canvas.height as f64);
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub canvas: Canvas,
    pub src_width: usize,
    pub src_height: usize,
}

impl LetterboxTransform {
    pub fn fit(src_width: usize, src_height: usize, canvas: Canvas) -> Result<Self> {
        if src_width == 0 || src_height == 0 {
            return Err(invalid(format!("cannot letterbox a {}x{} image", src_width, src_height)));
        }
        let (w, h) = (src_width as f64, src_height as f64);
        let (cw, ch) = (canvas.width as f64, canvas.height as f64);
        let scale = (cw / w).min(ch / h);
        Ok(Self {
            scale,
            offset_x: ((cw - scale * w) / 2.0).max(0.0),
            offset_y: ((ch - scale * h) / 2.0).max(0.0),
            canvas,
            src_width,
            src_height,
        })
    }

    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale * x + self.offset_x, self.scale * y + self.offset_y)
    }

    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale)
    }

    /// Width and height of the resized content region.
    pub fn content_size(&self) -> (f64, f64) {
        (self.scale * self.src_width as f64, self.scale * self.src_height as f64)
    }
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
    let bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes `img` by `s = min(W_t/W, H_t/H)` with bilinear sampling, centres it
/// on the canvas and fills the rest with zero.
pub fn letterbox(img: &GrayImage, canvas: Canvas) -> Result<(GrayImage, LetterboxTransform)> {
    let t = LetterboxTransform::fit(img.width, img.height, canvas)?;
    let (sw, sh) = (img.width as f64, img.height as f64);
    let mut out = GrayImage::filled(canvas.width, canvas.height, 0.0);
    for v in 0..canvas.height {
        for u in 0..canvas.width {
            let (xs, ys) = t.to_source(u as f64 + 0.5, v as f64 + 0.5);
            if xs < 0.0 || ys < 0.0 || xs >= sw || ys >= sh {
                continue;
            }
            out.set(u, v, bilinear(img, xs - 0.5, ys - 0.5));
        }
    }
    Ok((out, t))
}

/// Maps each corner through the letterbox transform and clips to the canvas.
pub fn remap_roi(roi: &RoiBox, t: &LetterboxTransform) -> RoiBox {
    let (x1, y1) = t.to_canvas(roi.x1, roi.y1);
    let (x2, y2) = t.to_canvas(roi.x2, roi.y2);
    RoiBox { x1, y1, x2, y2 }.clipped(t.canvas)
}

/// A box is kept when its clipped extent is at least 2 px on each side.
pub fn validate_roi(roi: &RoiBox, canvas: Canvas) -> bool {
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    if roi.x2 <= 0.0 || roi.y2 <= 0.0 || roi.x1 >= w || roi.y1 >= h {
        return false;
    }
    let c = roi.clipped(canvas);
    c.width() >= MIN_ROI_SIDE && c.height() >= MIN_ROI_SIDE
}
