//! Synthetic multi-site NT-like phantoms, the on-disk manifest and
//! leave-one-site-out split planning.
//!
//! A phantom is a bright body ellipse over a textured background with a dark
//! translucency band bounded by two thin bright membranes. Site styling then
//! applies gain, a power-law dynamic range curve, multiplicative correlated
//! speckle, vignetting and a field-of-view inset.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use roicae_numerics::{Rng, Stream};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::image::{read_pgm, write_pgm, GrayImage};
use crate::preprocess::{letterbox, remap_roi, validate_roi, Canvas, RoiBox};

/// Margin added around the rendered band when forming its ROI box.
pub const ROI_MARGIN: f64 = 4.0;
pub const VAL_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub id: String,
    pub gain: f64,
    pub gamma: f64,
    pub speckle_sigma: f64,
    /// Gaussian smoothing length of the speckle field, in raw pixels.
    pub speckle_corr: f64,
    pub vignette: f64,
    /// Fraction of each axis blanked at the borders (split evenly per side).
    pub fov_inset: f64,
    /// Native acquisition size before letterboxing.
    pub raw_width: usize,
    pub raw_height: usize,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gamma > 0.0 && self.speckle_sigma >= 0.0 && self.speckle_corr >= 0.0) {
            return Err(invalid(format!("site `{}`: gain/gamma must be > 0 and speckle >= 0", self.id)));
        }
        if !(0.0..=0.3).contains(&self.fov_inset) || !(0.0..1.0).contains(&self.vignette) {
            return Err(invalid(format!("site `{}`: inset must be in [0, 0.3] and vignette in [0, 1)", self.id)));
        }
        if self.raw_width < 8 || self.raw_height < 8 {
            return Err(invalid(format!("site `{}`: raw size below 8 px", self.id)));
        }
        Ok(())
    }

    pub fn identity(id: &str, raw_width: usize, raw_height: usize) -> Self {
        Self {
            id: id.to_string(),
            gain: 1.0,
            gamma: 1.0,
            speckle_sigma: 0.0,
            speckle_corr: 0.0,
            vignette: 0.0,
            fov_inset: 0.0,
            raw_width,
            raw_height,
        }
    }

    /// Three desk-scale sites: `A` and `B` are a near pair, `C` is far.
    pub fn defaults() -> Vec<SiteProfile> {
        vec![
            SiteProfile {
                id: "A".into(),
                gain: 1.0,
                gamma: 1.0,
                speckle_sigma: 0.22,
                speckle_corr: 1.0,
                vignette: 0.10,
                fov_inset: 0.04,
                raw_width: 200,
                raw_height: 140,
            },
            SiteProfile {
                id: "B".into(),
                gain: 0.93,
                gamma: 1.08,
                speckle_sigma: 0.26,
                speckle_corr: 1.2,
                vignette: 0.14,
                fov_inset: 0.06,
                raw_width: 192,
                raw_height: 136,
            },
            SiteProfile {
                id: "C".into(),
                gain: 0.72,
                gamma: 1.5,
                speckle_sigma: 0.40,
                speckle_corr: 2.0,
                vignette: 0.35,
                fov_inset: 0.16,
                raw_width: 180,
                raw_height: 150,
            },
        ]
    }

    /// The first `n` default profiles, extended with deterministic variants
    /// when more than three sites are requested.
    pub fn defaults_for(n: usize) -> Vec<SiteProfile> {
        let base = Self::defaults();
        (0..n)
            .map(|i| {
                if i < base.len() {
                    return base[i].clone();
                }
                let mut p = base[i % base.len()].clone();
                let k = (i / base.len()) as f64;
                p.id = format!("S{}", i + 1);
                p.gain = (p.gain * (1.0 - 0.07 * k)).max(0.3);
                p.gamma *= 1.0 + 0.1 * k;
                p.speckle_sigma += 0.04 * k;
                p
            })
            .collect()
    }

    pub fn with_speckle_scale(&self, k: f64) -> Self {
        Self {
            speckle_sigma: self.speckle_sigma * k,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub body_center: (f64, f64),
    pub body_axes: (f64, f64),
    pub body_level: f64,
    pub band_center: (f64, f64),
    pub band_length: f64,
    pub band_thickness: f64,
    /// Radians, measured from the x axis.
    pub band_angle: f64,
    pub band_level: f64,
    pub membrane_level: f64,
    pub membrane_width: f64,
    pub background_level: f64,
    /// Standard deviation of the smooth background texture.
    pub texture: f64,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.band_thickness < 3.0 {
            return Err(invalid("band thickness must be at least 3 px"));
        }
        if self.membrane_level < self.band_level + 0.2 {
            return Err(invalid("membranes must be at least 0.2 brighter than the band"));
        }
        if self.width < 8 || self.height < 8 || self.membrane_width <= 0.0 || self.band_length <= 0.0 {
            return Err(invalid("phantom geometry is degenerate"));
        }
        Ok(())
    }

    /// Random anatomy for a `width × height` acquisition. The band is kept
    /// well inside the body and inside the central 70% of the frame.
    pub fn sample(width: usize, height: usize, rng: &mut Rng) -> Self {
        let (w, h) = (width as f64, height as f64);
        let body_center = (w * rng.uniform_range(0.46, 0.54), h * rng.uniform_range(0.47, 0.55));
        let body_axes = (w * rng.uniform_range(0.34, 0.40), h * rng.uniform_range(0.30, 0.36));
        let band_length = w * rng.uniform_range(0.22, 0.32);
        let band_thickness = rng.uniform_range(4.0, 9.0);
        let band_center = (
            body_center.0 + w * rng.uniform_range(-0.06, 0.06),
            body_center.1 + h * rng.uniform_range(-0.02, 0.08),
        );
        Self {
            width,
            height,
            body_center,
            body_axes,
            body_level: rng.uniform_range(0.48, 0.6),
            band_center,
            band_length,
            band_thickness,
            band_angle: rng.uniform_range(-0.25, 0.25),
            band_level: rng.uniform_range(0.05, 0.12),
            membrane_level: rng.uniform_range(0.85, 0.95),
            membrane_width: rng.uniform_range(1.8, 2.8),
            background_level: rng.uniform_range(0.12, 0.2),
            texture: 0.03,
        }
    }

    fn half_extent(&self) -> (f64, f64) {
        (self.band_length / 2.0, self.band_thickness / 2.0 + self.membrane_width)
    }

    /// Tight box around the band and membranes plus [`ROI_MARGIN`].
    pub fn band_box(&self) -> RoiBox {
        let (hu, hv) = self.half_extent();
        let (c, s) = (self.band_angle.cos(), self.band_angle.sin());
        let ex = hu * c.abs() + hv * s.abs();
        let ey = hu * s.abs() + hv * c.abs();
        RoiBox {
            x1: self.band_center.0 - ex - ROI_MARGIN,
            y1: self.band_center.1 - ey - ROI_MARGIN,
            x2: self.band_center.0 + ex + ROI_MARGIN,
            y2: self.band_center.1 + ey + ROI_MARGIN,
        }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.band_center.0, y - self.band_center.1);
        let (c, s) = (self.band_angle.cos(), self.band_angle.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (hu, hv) = self.half_extent();
        if u.abs() <= hu && v.abs() <= hv {
            return if v.abs() < self.band_thickness / 2.0 {
                self.band_level
            } else {
                self.membrane_level
            };
        }
        let ex = (x - self.body_center.0) / self.body_axes.0;
        let ey = (y - self.body_center.1) / self.body_axes.1;
        if ex * ex + ey * ey <= 1.0 {
            self.body_level
        } else {
            self.background_level
        }
    }
}

/// Separable Gaussian blur with clamped borders; `sigma == 0` is a no-op.
fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += t * data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Zero-mean, unit-variance field of Gaussian-smoothed white noise.
pub fn correlated_noise(w: usize, h: usize, corr: f64, rng: &mut Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| rng.normal()).collect();
    let mut field = gaussian_blur(&white, w, h, corr);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    field
}

/// Renders the anatomy with 3×3 supersampling plus smooth background texture.
pub fn render_phantom(params: &PhantomParams, rng: &mut Rng) -> Result<(GrayImage, RoiBox)> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let texture = correlated_noise(w, h, 2.5, rng);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    acc += params.intensity(x as f64 + (sx as f64 + 0.5) / 3.0, y as f64 + (sy as f64 + 0.5) / 3.0);
                }
            }
            let v = acc / 9.0 + params.texture * texture[y * w + x];
            data[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    Ok((GrayImage::new(w, h, data)?, params.band_box()))
}

/// `clip(gain · I^gamma · (1 + σ·n), 0, 1)`, then vignette and FOV inset.
pub fn apply_site_style(img: &GrayImage, profile: &SiteProfile, rng: &mut Rng) -> Result<GrayImage> {
    profile.validate()?;
    let (w, h) = (img.width, img.height);
    let noise = if profile.speckle_sigma > 0.0 {
        Some(correlated_noise(w, h, profile.speckle_corr, rng))
    } else {
        None
    };
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let half_diag = (cx * cx + cy * cy).sqrt();
    let (mx, my) = (profile.fov_inset / 2.0 * w as f64, profile.fov_inset / 2.0 * h as f64);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let n = noise.as_ref().map_or(0.0, |f| f[i]);
            let mut v = (profile.gain * img.data[i].powf(profile.gamma) * (1.0 + profile.speckle_sigma * n)).clamp(0.0, 1.0);
            if profile.vignette > 0.0 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let r2 = (dx * dx + dy * dy) / (half_diag * half_diag);
                v *= 1.0 - profile.vignette * r2;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < mx || px > w as f64 - mx || py < my || py > h as f64 - my {
                v = 0.0;
            }
            out.push(v);
        }
    }
    GrayImage::new(w, h, out)
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub site: String,
    pub path: String,
    pub roi: [f64; 4],
    pub width: usize,
    pub height: usize,
    /// Per-sample speckle severity in `[0, 1]` (drives the QC demo labels).
    #[serde(default)]
    pub degradation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A canvas-sized training/evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub site: String,
    pub image: GrayImage,
    pub roi: RoiBox,
    pub degradation: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| CoreError::Corrupt {
                path: path.to_path_buf(),
                detail: format!("line {}: {}", lineno + 1, e),
            })?;
            entries.push(e);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("manifest rows serialise");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    /// Site ids in first-appearance order.
    pub fn sites(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.site) {
                seen.push(e.site.clone());
            }
        }
        seen
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn load_sample(&self, e: &ManifestEntry) -> Result<Sample> {
        let image = read_pgm(&self.root.join(&e.path))?;
        if (image.width, image.height) != (e.width, e.height) {
            return Err(CoreError::Corrupt {
                path: self.root.join(&e.path),
                detail: format!("expected {}x{}, found {}x{}", e.width, e.height, image.width, image.height),
            });
        }
        Ok(Sample {
            id: e.id.clone(),
            site: e.site.clone(),
            image,
            roi: RoiBox {
                x1: e.roi[0],
                y1: e.roi[1],
                x2: e.roi[2],
                y2: e.roi[3],
            },
            degradation: e.degradation,
        })
    }

    pub fn load_ids(&self, ids: &[String]) -> Result<Vec<Sample>> {
        let index: BTreeMap<&str, &ManifestEntry> = self.entries.iter().map(|e| (e.id.as_str(), e)).collect();
        ids.iter()
            .map(|id| {
                let e = index.get(id.as_str()).ok_or_else(|| invalid(format!("sample `{id}` not in manifest")))?;
                self.load_sample(e)
            })
            .collect()
    }

    pub fn canvas(&self) -> Result<Canvas> {
        let e = self.entries.first().ok_or_else(|| invalid("empty manifest"))?;
        Canvas::new(e.width, e.height)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub profiles: Vec<SiteProfile>,
    pub n_per_site: usize,
    pub canvas: Canvas,
    pub seed: u64,
}

/// Renders, styles and letterboxes one sample.
pub fn synthesize_sample(profile: &SiteProfile, canvas: Canvas, seed: u64, site_index: usize, index: usize) -> Result<Sample> {
    let mut rng = Rng::substream(seed, Stream::Data, ((site_index as u64) << 32) | index as u64);
    let params = PhantomParams::sample(profile.raw_width, profile.raw_height, &mut rng);
    let (raw, raw_roi) = render_phantom(&params, &mut rng)?;
    let degradation = rng.uniform();
    // per-exam exposure varies around the site's gain
    let exposure = rng.uniform_range(0.8, 1.2);
    let style = SiteProfile {
        gain: profile.gain * exposure,
        ..profile.with_speckle_scale(0.25 + 1.75 * degradation)
    };
    let styled = apply_site_style(&raw, &style, &mut rng)?;
    let (image, transform) = letterbox(&styled, canvas)?;
    let roi = remap_roi(&raw_roi, &transform);
    let id = format!("{}-{:04}", profile.id, index);
    if !validate_roi(&roi, canvas) {
        return Err(CoreError::Degenerate(format!("sample {id}: ROI rejected after letterboxing")));
    }
    Ok(Sample {
        id,
        site: profile.id.clone(),
        image,
        roi,
        degradation,
    })
}

/// Writes `images/<id>.pgm` and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.profiles.len() < 2 {
        return Err(invalid("at least two site profiles are required"));
    }
    if spec.n_per_site < 20 {
        return Err(invalid("at least 20 samples per site are required"));
    }
    let mut ids = HashSet::new();
    for p in &spec.profiles {
        p.validate()?;
        if !ids.insert(p.id.clone()) {
            return Err(invalid(format!("duplicate site id `{}`", p.id)));
        }
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut entries = Vec::with_capacity(spec.profiles.len() * spec.n_per_site);
    for (si, profile) in spec.profiles.iter().enumerate() {
        for i in 0..spec.n_per_site {
            let s = synthesize_sample(profile, spec.canvas, spec.seed, si, i)?;
            let rel = format!("images/{}.pgm", s.id);
            write_pgm(&out_dir.join(&rel), &s.image)?;
            entries.push(ManifestEntry {
                id: s.id,
                site: s.site,
                path: rel,
                roi: s.roi.as_array(),
                width: spec.canvas.width,
                height: spec.canvas.height,
                degradation: s.degradation,
            });
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let profiles_path = out_dir.join("profiles.json");
    let mut f = fs::File::create(&profiles_path).map_err(io_err(&profiles_path))?;
    serde_json::to_writer_pretty(&mut f, &spec.profiles).expect("profiles serialise");
    f.write_all(b"\n").map_err(io_err(&profiles_path))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub held_out: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Runtime check that the held-out site never leaks into train/val.
    pub fn assert_hygiene(&self, manifest: &Manifest) -> Result<()> {
        let test: HashSet<&str> = self.test.iter().map(String::as_str).collect();
        for id in self.train.iter().chain(&self.val) {
            if test.contains(id.as_str()) {
                return Err(CoreError::Leakage(format!("test sample `{id}` appears in train/val")));
            }
            match manifest.entry(id) {
                Some(e) if e.site == self.held_out => {
                    return Err(CoreError::Leakage(format!("`{id}` from held-out site `{}` used for training", e.site)))
                }
                None => return Err(invalid(format!("sample `{id}` not in manifest"))),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Test = every sample of `held_out`; the rest is shuffled under `seed` and
/// `round(0.15·n)` of it becomes validation.
pub fn make_split(manifest: &Manifest, held_out: &str, seed: u64) -> Result<SplitPlan> {
    let test: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.site == held_out)
        .map(|e| e.id.clone())
        .collect();
    if test.is_empty() {
        return Err(CoreError::UnknownSite(held_out.to_string()));
    }
    let mut rest: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.site != held_out)
        .map(|e| e.id.clone())
        .collect();
    if rest.is_empty() {
        return Err(invalid("no training sites remain after holding one out"));
    }
    let mut rng = Rng::stream(seed, Stream::Shuffle);
    rng.shuffle(&mut rest);
    let n_val = (VAL_FRACTION * rest.len() as f64).round() as usize;
    let train = rest.split_off(n_val);
    let plan = SplitPlan {
        held_out: held_out.to_string(),
        seed,
        train,
        val: rest,
        test,
    };
    plan.assert_hygiene(manifest)?;
    Ok(plan)
}
