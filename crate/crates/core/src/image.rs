//! Grayscale images and 8-bit PGM/PPM files.

use std::fs;
use std::path::Path;

use roicae_numerics::Tensor;

use crate::error::{invalid, io_err, CoreError, Result};

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!("{}x{} image needs {} values, got {}", width, height, width * height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `1×1×H×W` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("shape matches")
    }

    pub fn from_plane(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4("GrayImage::from_plane")?;
        if c != 1 {
            return Err(invalid("expected a single-channel tensor"));
        }
        let plane = t.data()[index * h * w..(index + 1) * h * w].to_vec();
        Self::new(w, h, plane)
    }

    /// Axis-aligned crop; the rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self { width: w, height: h, data }
    }
}

/// Stacks same-sized images into an `N×1×H×W` batch.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some((img.width, img.height)),
            Some(d) if d != (img.width, img.height) => return Err(invalid("batch images differ in size")),
            _ => {}
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let (w, h) = dims.ok_or_else(|| invalid("empty batch"))?;
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5), values `round(255·I)`.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Binary PPM (P6) from packed RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |detail: &str| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace (comments allowed).
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(corrupt("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(corrupt("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(corrupt("only 8-bit PGM is supported"));
    }
    i += 1;
    let pixels = bytes.get(i..i + w * h).ok_or_else(|| corrupt("truncated pixel data"))?;
    let data = pixels.iter().map(|&b| b as f64 / maxval as f64).collect();
    GrayImage::new(w, h, data)
}
