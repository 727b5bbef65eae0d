//! Differentiable training objectives built on the tape: MS-SSIM, ROI-L1,
//! the normalised Sobel edge loss and the weighted Phase-2 total.
//!
//! All losses take `N×1×H×W` nodes and return per-sample `[N]` nodes; callers
//! average over the batch.

use std::rc::Rc;

use roicae_numerics::{kernels, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::preprocess::{Canvas, RoiBox};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SOBEL_EPS: f64 = 1e-8;
/// Floor applied to per-scale similarities before the fractional power.
const SIM_FLOOR: f64 = 1e-8;
pub const MIN_MASK_PIXELS: usize = 4;

/// Pixels whose centres lie inside a box.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub count: usize,
}

impl RoiMask {
    pub fn from_box(roi: &RoiBox, canvas: Canvas) -> Result<Self> {
        let (w, h) = (canvas.width, canvas.height);
        let mut data = vec![0.0; w * h];
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                if roi.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                    data[y * w + x] = 1.0;
                    count += 1;
                }
            }
        }
        if count < MIN_MASK_PIXELS {
            return Err(CoreError::EmptyMask);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            count,
        })
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the mask.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] > 0.0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    }
}

/// Stacks masks into an `N×1×H×W` weight tensor for [`Graph::masked_mean`].
pub fn mask_batch<'a>(masks: impl IntoIterator<Item = &'a RoiMask>) -> Result<Rc<Tensor>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for m in masks {
        if *dims.get_or_insert((m.height, m.width)) != (m.height, m.width) {
            return Err(invalid("masks in a batch must share one canvas"));
        }
        data.extend_from_slice(&m.data);
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| invalid("empty mask batch"))?;
    Ok(Rc::new(Tensor::new(vec![n, 1, h, w], data)?))
}

/// Largest scale count (≤ 5) with `min(H, W) ≥ 11·2^(s−1)`.
pub fn auto_scales(height: usize, width: usize) -> Result<usize> {
    let m = height.min(width);
    let s = (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&s| m >= SSIM_WINDOW << (s - 1));
    s.ok_or_else(|| invalid(format!("{height}×{width} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")))
}

/// The first `scales` reference weights renormalised to sum to one.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn per_sample_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let ones = Rc::new(Tensor::full(g.value(x).shape(), 1.0));
    Ok(g.masked_mean(x, ones)?)
}

/// Per-sample `(mean cs, mean ssim)` at one scale.
fn ssim_terms(g: &mut Graph, x: Var, y: Var, taps: &Rc<[f64]>) -> Result<(Var, Var)> {
    let mx = g.filter_valid(x, taps.clone())?;
    let my = g.filter_valid(y, taps.clone())?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.filter_valid(xx, taps.clone())?;
    let eyy = g.filter_valid(yy, taps.clone())?;
    let exy = g.filter_valid(xy, taps.clone())?;
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;

    let cs_num = g.mul_scalar(sxy, 2.0);
    let cs_num = g.add_scalar(cs_num, SSIM_C2);
    let cs_den = g.add(sxx, syy)?;
    let cs_den = g.add_scalar(cs_den, SSIM_C2);
    let cs_map = g.div(cs_num, cs_den)?;

    let l_num = g.mul_scalar(mxy, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let l_den = g.add(mx2, my2)?;
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let l_map = g.div(l_num, l_den)?;
    let ssim_map = g.mul(l_map, cs_map)?;

    Ok((per_sample_mean(g, cs_map)?, per_sample_mean(g, ssim_map)?))
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(invalid(format!("{op}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(g.value(a).dims4("loss input")?)
}

/// Per-sample MS-SSIM with the scale count reduced to fit the image.
pub fn ms_ssim(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (_, _, h, w) = same_shape(g, x, y, "ms_ssim")?;
    ms_ssim_scales(g, x, y, auto_scales(h, w)?)
}

/// Per-sample MS-SSIM at a fixed number of scales.
pub fn ms_ssim_scales(g: &mut Graph, x: Var, y: Var, scales: usize) -> Result<Var> {
    let (_, _, h, w) = same_shape(g, x, y, "ms_ssim")?;
    if scales == 0 || scales > auto_scales(h, w)? {
        return Err(invalid(format!("{scales} scales do not fit a {h}×{w} image")));
    }
    let taps: Rc<[f64]> = kernels::gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into();
    let weights = scale_weights(scales);
    let (mut xs, mut ys) = (x, y);
    let mut acc: Option<Var> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let (cs, ssim) = ssim_terms(g, xs, ys, &taps)?;
        let term = if s + 1 == scales { ssim } else { cs };
        let term = g.clamp_min(term, SIM_FLOOR);
        let term = g.powf(term, wt);
        acc = Some(match acc {
            None => term,
            Some(a) => g.mul(a, term)?,
        });
        if s + 1 < scales {
            xs = g.avg_pool2(xs)?;
            ys = g.avg_pool2(ys)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// Per-sample single-scale SSIM.
pub fn ssim(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, x, y, "ssim")?;
    let taps: Rc<[f64]> = kernels::gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into();
    Ok(ssim_terms(g, x, y, &taps)?.1)
}

/// `1 − MS-SSIM`, per sample.
pub fn phase1_loss(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let m = ms_ssim(g, x, y)?;
    let neg = g.mul_scalar(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean absolute error over the mask, per sample.
pub fn roi_l1(g: &mut Graph, x: Var, y: Var, mask: Rc<Tensor>) -> Result<Var> {
    same_shape(g, x, y, "roi_l1")?;
    let d = g.sub(x, y)?;
    let a = g.abs(d);
    Ok(g.masked_mean(a, mask)?)
}

fn sobel_kernels() -> (Tensor, Tensor) {
    let gx = Tensor::new(vec![1, 1, 3, 3], vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]).expect("3x3");
    let gy = Tensor::new(vec![1, 1, 3, 3], vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]).expect("3x3");
    (gx, gy)
}

/// Unnormalised magnitude `√(Gx² + Gy² + ε²) − ε` with replicate padding;
/// exactly zero where the image is flat.
pub fn sobel_magnitude(g: &mut Graph, x: Var) -> Result<Var> {
    g.value(x).dims4("sobel")?;
    let (kx, ky) = sobel_kernels();
    let kx = g.constant(kx);
    let ky = g.constant(ky);
    let zero = g.constant(Tensor::zeros(&[1]));
    let padded = g.replicate_pad(x, 1)?;
    let gx = g.conv2d(padded, kx, zero, 1, 0)?;
    let gy = g.conv2d(padded, ky, zero, 1, 0)?;
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let s = g.add(gx2, gy2)?;
    let s = g.add_scalar(s, SOBEL_EPS * SOBEL_EPS);
    let m = g.sqrt(s);
    Ok(g.add_scalar(m, -SOBEL_EPS))
}

/// `M / (max M + ε)` per image, so values lie in `[0, 1]`.
pub fn sobel_norm_magnitude(g: &mut Graph, x: Var) -> Result<Var> {
    let m = sobel_magnitude(g, x)?;
    let peak = g.max_spatial(m)?;
    let denom = g.add_scalar(peak, SOBEL_EPS);
    Ok(g.div_broadcast(m, denom)?)
}

/// Mean `|M̃(x) − M̃(y)|` over the mask, per sample.
pub fn roi_edge_loss(g: &mut Graph, x: Var, y: Var, mask: Rc<Tensor>) -> Result<Var> {
    same_shape(g, x, y, "roi_edge_loss")?;
    let mx = sobel_norm_magnitude(g, x)?;
    let my = sobel_norm_magnitude(g, y)?;
    let d = g.sub(mx, my)?;
    let a = g.abs(d);
    Ok(g.masked_mean(a, mask)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub glob: f64,
    pub l1: f64,
    pub edge: f64,
}

impl LossWeights {
    pub const GLOBAL_ONLY: LossWeights = LossWeights {
        glob: 1.0,
        l1: 0.0,
        edge: 0.0,
    };

    pub fn new(glob: f64, l1: f64, edge: f64) -> Result<Self> {
        let w = Self { glob, l1, edge };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {v:?}")));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(invalid("loss weights are all zero"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.glob, self.l1, self.edge]
    }
}

/// Per-sample component nodes of the Phase-2 objective.
#[derive(Clone, Copy, Debug)]
pub struct Phase2Terms {
    pub glob: Var,
    pub l1: Var,
    pub edge: Var,
}

pub fn phase2_terms(g: &mut Graph, x: Var, y: Var, mask: Rc<Tensor>) -> Result<Phase2Terms> {
    Ok(Phase2Terms {
        glob: phase1_loss(g, x, y)?,
        l1: roi_l1(g, x, y, mask.clone())?,
        edge: roi_edge_loss(g, x, y, mask)?,
    })
}

/// `λ_glob·L_glob + λ_L1·L_ROI-L1 + λ_edge·L_edge`, per sample. Terms with
/// zero weight are left off the tape entirely.
pub fn phase2_total(g: &mut Graph, x: Var, y: Var, mask: Rc<Tensor>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut acc: Option<Var> = None;
    let mut add = |g: &mut Graph, term: Var, lambda: f64| -> Result<()> {
        let t = g.mul_scalar(term, lambda);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
        Ok(())
    };
    if w.glob > 0.0 {
        let t = phase1_loss(g, x, y)?;
        add(g, t, w.glob)?;
    }
    if w.l1 > 0.0 {
        let t = roi_l1(g, x, y, mask.clone())?;
        add(g, t, w.l1)?;
    }
    if w.edge > 0.0 {
        let t = roi_edge_loss(g, x, y, mask)?;
        add(g, t, w.edge)?;
    }
    Ok(acc.expect("weights validated non-zero"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_rule() {
        assert_eq!(auto_scales(112, 160).unwrap(), 4);
        assert_eq!(auto_scales(32, 32).unwrap(), 2);
        assert_eq!(auto_scales(176, 176).unwrap(), 5);
        assert!(auto_scales(10, 64).is_err());
        let w = scale_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / 0.6305).abs() < 1e-15);
    }

    #[test]
    fn mask_uses_pixel_centres() {
        let c = Canvas::new(16, 16).unwrap();
        let m = RoiMask::from_box(&RoiBox::new(1.4, 2.0, 4.6, 4.4).unwrap(), c).unwrap();
        // columns 1..=4 (centres 1.5..4.5), rows 2..=3 (centres 2.5, 3.5)
        assert_eq!(m.count, 8);
        assert_eq!(m.bounds(), (1, 2, 4, 3));
        assert!(matches!(
            RoiMask::from_box(&RoiBox::new(1.6, 1.6, 2.4, 5.0).unwrap(), c),
            Err(CoreError::EmptyMask)
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_ok());
    }
}
