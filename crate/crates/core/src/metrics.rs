//! Evaluation metrics: PSNR, image/ROI similarity records, AUROC, rank
//! statistics and softmax confidence.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use roicae_numerics::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::image::GrayImage;
use crate::losses::{self, RoiMask, SSIM_WINDOW};

pub const PSNR_CAP: f64 = 100.0;
/// Minimum side of the crop used for ROI SSIM.
pub const ROI_CROP_MIN: usize = 16;

/// `10·log10(1/MSE)`, capped at 100 dB.
pub fn psnr(x: &[f64], y: &[f64]) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Mann–Whitney estimate of `P(pos > neg)` with ties counted as one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid("AUROC needs at least one positive and one negative score"));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(invalid("AUROC scores contain NaN"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ranks = average_ranks(&all.iter().map(|p| p.0).collect::<Vec<_>>());
    let rank_sum: f64 = all.iter().zip(&ranks).filter(|(p, _)| p.1).map(|(_, r)| r).sum();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// 1-based ranks with ties sharing their average rank; input need not be sorted.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub r2: f64,
    pub spearman: f64,
}

/// `R² = 1 − SS_res/SS_tot` and Spearman's ρ with average-rank ties. A
/// constant prediction gets ρ = 0.
pub fn rank_stats(y_true: &[f64], y_pred: &[f64]) -> Result<RankStats> {
    if y_true.len() != y_pred.len() {
        return Err(invalid("rank_stats: length mismatch"));
    }
    if y_true.len() < 3 {
        return Err(invalid("rank_stats needs at least 3 samples"));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(CoreError::Degenerate("rank_stats: constant target".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    let spearman = match pearson(&average_ranks(y_true), &average_ranks(y_pred)) {
        Some(r) => r,
        None => {
            log::warn!("constant prediction: Spearman rho set to 0");
            0.0
        }
    };
    Ok(RankStats {
        r2: 1.0 - ss_res / ss_tot,
        spearman,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxStats {
    pub confidence: f64,
    pub entropy: f64,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Maximum softmax probability and entropy in nats.
pub fn softmax_stats(logits: &[f64]) -> Result<SoftmaxStats> {
    if logits.len() < 2 {
        return Err(invalid("softmax_stats needs at least two classes"));
    }
    let p = softmax(logits);
    Ok(SoftmaxStats {
        confidence: p.iter().copied().fold(0.0, f64::max),
        entropy: -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub site: String,
    pub split: String,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub roi_mae: f64,
    pub roi_ms_ssim: f64,
    pub roi_edge_mae: f64,
}

pub const METRIC_COLUMNS: [&str; 5] = ["psnr", "ms_ssim", "roi_mae", "roi_ms_ssim", "roi_edge_mae"];

impl MetricRecord {
    pub fn values(&self) -> [f64; 5] {
        [self.psnr, self.ms_ssim, self.roi_mae, self.roi_ms_ssim, self.roi_edge_mae]
    }
}

/// Crop window around the mask, grown symmetrically to at least 16 px and
/// shifted to stay inside the canvas.
pub fn roi_crop_window(mask: &RoiMask) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = mask.bounds();
    let grow = |lo: usize, hi: usize, len: usize| {
        let size = (hi - lo + 1).max(ROI_CROP_MIN).min(len);
        let centre = (lo + hi + 1) as f64 / 2.0;
        let start = (centre - size as f64 / 2.0).round().max(0.0) as usize;
        (start.min(len - size), size)
    };
    let (cx, w) = grow(x0, x1, mask.width);
    let (cy, h) = grow(y0, y1, mask.height);
    (cx, cy, w, h)
}

/// Reconstruction metrics for one target/reconstruction pair.
pub fn image_metrics(target: &GrayImage, recon: &GrayImage, mask: &RoiMask) -> Result<[f64; 5]> {
    if (target.width, target.height) != (recon.width, recon.height) || (mask.width, mask.height) != (target.width, target.height) {
        return Err(invalid("image_metrics: target, reconstruction and mask sizes differ"));
    }
    let mut g = Graph::new();
    let x = g.constant(target.to_tensor());
    let y = g.constant(recon.to_tensor());
    let weights = Rc::new(Tensor::new(vec![1, 1, mask.height, mask.width], mask.data.clone())?);
    let ms = losses::ms_ssim(&mut g, x, y)?;
    let l1 = losses::roi_l1(&mut g, x, y, weights.clone())?;
    let edge = losses::roi_edge_loss(&mut g, x, y, weights)?;

    let (cx, cy, cw, ch) = roi_crop_window(mask);
    debug_assert!(cw >= SSIM_WINDOW && ch >= SSIM_WINDOW);
    let xc = g.constant(target.crop(cx, cy, cw, ch).to_tensor());
    let yc = g.constant(recon.crop(cx, cy, cw, ch).to_tensor());
    let roi_ssim = losses::ssim(&mut g, xc, yc)?;

    Ok([
        psnr(&target.data, &recon.data),
        g.value(ms).item(),
        g.value(l1).item(),
        g.value(roi_ssim).item(),
        g.value(edge).item(),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; `None` for fewer than two values.
    pub std: Option<f64>,
}

pub fn mean_std(v: &[f64]) -> MeanStd {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    MeanStd { mean, std }
}

/// Column means over a set of records, in [`METRIC_COLUMNS`] order.
pub fn mean_metrics(records: &[MetricRecord]) -> [f64; 5] {
    let mut acc = [0.0; 5];
    for r in records {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    acc.map(|a| a / records.len().max(1) as f64)
}

pub fn write_metric_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "id,site,split,psnr,ms_ssim,roi_mae,roi_ms_ssim,roi_edge_mae").expect("in-memory write");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.id, r.site, r.split, r.psnr, r.ms_ssim, r.roi_mae, r.roi_ms_ssim, r.roi_edge_mae
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |detail: String| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("id,site,split,psnr,ms_ssim,roi_mae,roi_ms_ssim,roi_edge_mae") => {}
        other => return Err(corrupt(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(corrupt(format!("row {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("row {}: {e}", i + 2)));
            Ok(MetricRecord {
                id: f[0].into(),
                site: f[1].into(),
                split: f[2].into(),
                psnr: num(f[3])?,
                ms_ssim: num(f[4])?,
                roi_mae: num(f[5])?,
                roi_ms_ssim: num(f[6])?,
                roi_edge_mae: num(f[7])?,
            })
        })
        .collect()
}
