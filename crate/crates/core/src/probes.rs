//! Frozen-latent probes: site classifier, Mahalanobis/KNN OOD scores, the QC
//! ridge regressor, PCA and latent interpolation.
//!
//! Everything except extraction and interpolation runs on stored
//! [`LatentRecord`]s, never on the network.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use roicae_numerics::{AdamConfig, AdamState, Gradients, ParamId, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::image::GrayImage;
use crate::metrics::{auroc, image_metrics, mean_std, rank_stats, softmax, softmax_stats, MeanStd, RankStats};
use crate::model::{roi_pool_features, Cae};
use crate::train::PreparedSet;

pub const KNN_K: usize = 10;
pub const RIDGE_ALPHA: f64 = 1.0;
pub const TAU_SCALE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: String,
    pub site: String,
    pub split: String,
    pub z: Vec<f64>,
    pub z_roi: Vec<f64>,
    pub r_roi: f64,
    pub e_roi: f64,
    pub z_norm: f64,
}

impl LatentRecord {
    /// `q(x) = (r_Ω, e_Ω, ‖z‖₂)`.
    pub fn qc_features(&self) -> [f64; 3] {
        [self.r_roi, self.e_roi, self.z_norm]
    }
}

/// Encodes and reconstructs every sample with the frozen model.
pub fn extract_latents(model: &Cae, set: &PreparedSet, split: &str, batch_size: usize) -> Result<Vec<LatentRecord>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk)?;
        let (z_map, z) = model.encode_latent(&x)?;
        let recon = model.decode(&z)?;
        let l = model.config.latent;
        for (j, &i) in chunk.iter().enumerate() {
            let s = &set.samples[i];
            let r = GrayImage::from_plane(&recon, j)?;
            let [_, _, r_roi, _, e_roi] = image_metrics(&s.image, &r, &set.masks[i])?;
            let zv = z.data()[j * l..(j + 1) * l].to_vec();
            out.push(LatentRecord {
                id: s.id.clone(),
                site: s.site.clone(),
                split: split.to_string(),
                z_norm: zv.iter().map(|v| v * v).sum::<f64>().sqrt(),
                z: zv,
                z_roi: roi_pool_features(&z_map, j, &s.roi)?,
                r_roi,
                e_roi,
            });
        }
    }
    Ok(out)
}

pub fn write_latents_csv(path: &Path, records: &[LatentRecord]) -> Result<()> {
    let first = records.first().ok_or_else(|| invalid("no latent records to write"))?;
    let mut out = Vec::new();
    let mut header = vec!["id".to_string(), "site".into(), "split".into()];
    header.extend((0..first.z.len()).map(|i| format!("z{i}")));
    header.extend((0..first.z_roi.len()).map(|i| format!("zroi{i}")));
    header.extend(["r_roi".into(), "e_roi".into(), "z_norm".into()]);
    writeln!(out, "{}", header.join(",")).expect("in-memory write");
    for r in records {
        let mut row = vec![r.id.clone(), r.site.clone(), r.split.clone()];
        row.extend(r.z.iter().chain(&r.z_roi).map(|v| v.to_string()));
        row.extend([r.r_roi, r.e_roi, r.z_norm].map(|v| v.to_string()));
        writeln!(out, "{}", row.join(",")).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_latents_csv(path: &Path) -> Result<Vec<LatentRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |detail: String| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| corrupt("empty file".into()))?.split(',').collect();
    let nz = header.iter().filter(|h| h.starts_with('z') && h[1..].parse::<usize>().is_ok()).count();
    let nroi = header.iter().filter(|h| h.starts_with("zroi")).count();
    if header.len() != 6 + nz + nroi {
        return Err(corrupt("unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(corrupt(format!("row {} has {} fields", i + 2, f.len())));
            }
            let nums = f[3..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| corrupt(format!("row {}: {e}", i + 2)))?;
            Ok(LatentRecord {
                id: f[0].into(),
                site: f[1].into(),
                split: f[2].into(),
                z: nums[..nz].to_vec(),
                z_roi: nums[nz..nz + nroi].to_vec(),
                r_roi: nums[nz + nroi],
                e_roi: nums[nz + nroi + 1],
                z_norm: nums[nz + nroi + 2],
            })
        })
        .collect()
}

fn matrix(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let d = rows.first().ok_or_else(|| invalid("no vectors"))?.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(invalid("vectors have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    (mean, cov)
}

/// Gaussian fit with a Cholesky factor of `Σ + τI`.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub tau: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl GaussianFit {
    /// `τ = 1e-6·trace(Σ)/dim`.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let x = matrix(rows)?;
        let (mean, cov) = mean_and_cov(&x);
        let tau = TAU_SCALE * cov.trace() / cov.nrows() as f64;
        Self::with_tau(mean, cov, tau)
    }

    pub fn with_tau(mean: DVector<f64>, cov: DMatrix<f64>, tau: f64) -> Result<Self> {
        let reg = &cov + DMatrix::identity(cov.nrows(), cov.ncols()) * tau;
        let chol = reg
            .cholesky()
            .ok_or_else(|| CoreError::Degenerate("covariance is not positive definite after regularisation".into()))?;
        Ok(Self { mean, cov, tau, chol })
    }

    /// `√((z−μ)ᵀ (Σ+τI)⁻¹ (z−μ))`.
    pub fn mahalanobis(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.mean.len() {
            return Err(invalid(format!("query has {} dims, fit has {}", z.len(), self.mean.len())));
        }
        let d = DVector::from_column_slice(z) - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .ok_or_else(|| CoreError::Degenerate("singular Cholesky factor".into()))?;
        Ok(y.norm_squared().sqrt())
    }
}

/// Mean Euclidean distance to the `k` nearest references (exhaustive).
pub fn knn_score(reference: &[&[f64]], z: &[f64], k: usize) -> Result<f64> {
    if k == 0 || reference.len() < k {
        return Err(invalid(format!("KNN needs at least {k} references, have {}", reference.len())));
    }
    let mut d: Vec<f64> = reference
        .iter()
        .map(|r| r.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(d[..k].iter().sum::<f64>() / k as f64)
}

/// Per-feature mean and standard deviation (1 where a feature is constant).
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let x = matrix(rows)?;
        let n = x.nrows() as f64;
        let mean: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).sum() / n).collect();
        let scale = (0..x.ncols())
            .map(|j| {
                let v = x.column(j).iter().map(|a| (a - mean[j]) * (a - mean[j])).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Multinomial logistic regression on standardised inputs.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub standardizer: Standardizer,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub const PROBE_EPOCHS: usize = 100;
pub const PROBE_LR: f64 = 1e-2;
pub const PROBE_WEIGHT_DECAY: f64 = 1e-4;

impl LinearProbe {
    /// Full-batch Adam on cross-entropy from a zero initialisation.
    pub fn fit(rows: &[&[f64]], labels: &[String]) -> Result<Self> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(invalid("linear probe: rows and labels must be non-empty and aligned"));
        }
        let mut classes: Vec<String> = labels.to_vec();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(invalid("linear probe needs at least two classes"));
        }
        let standardizer = Standardizer::fit(rows)?;
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
        let y: Vec<usize> = labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label in class list"))
            .collect();
        let (n, d, c) = (xs.len(), xs[0].len(), classes.len());

        let mut params = ParamSet::new();
        let wid = params.push("probe.weight", Tensor::zeros(&[c, d]));
        let bid = params.push("probe.bias", Tensor::zeros(&[c]));
        let cfg = AdamConfig {
            weight_decay: PROBE_WEIGHT_DECAY,
            ..AdamConfig::with_lr(PROBE_LR)
        };
        let mut adam = AdamState::new(&params, cfg)?;
        for _ in 0..PROBE_EPOCHS {
            let (w, b) = (params.get(wid).data(), params.get(bid).data());
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for (x, &yi) in xs.iter().zip(&y) {
                let logits: Vec<f64> = (0..c)
                    .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                    .collect();
                let p = softmax(&logits);
                for k in 0..c {
                    let e = (p[k] - f64::from(u8::from(k == yi))) / n as f64;
                    gb[k] += e;
                    for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += e * v;
                    }
                }
            }
            let mut grads = Gradients::default();
            grads.insert(wid, Tensor::new(vec![c, d], gw)?);
            grads.insert(bid, Tensor::new(vec![c], gb)?);
            adam.step(&mut params, &grads)?;
        }
        Ok(Self {
            classes,
            standardizer,
            weight: params.get(ParamId(0)).clone(),
            bias: params.get(ParamId(1)).clone(),
        })
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let x = self.standardizer.apply(z);
        let d = x.len();
        (0..self.classes.len())
            .map(|k| self.bias.data()[k] + self.weight.data()[k * d..(k + 1) * d].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> &str {
        let l = self.logits(z);
        let k = (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best });
        &self.classes[k]
    }
}

/// Ridge regression with train-split standardisation and a mean intercept.
#[derive(Clone, Debug)]
pub struct RidgeModel {
    pub standardizer: Standardizer,
    pub weights: DVector<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    /// `w = (XᵀX + αI)⁻¹ Xᵀ(y − ȳ)` on standardised `X`.
    pub fn fit(rows: &[&[f64]], y: &[f64], alpha: f64) -> Result<Self> {
        if rows.len() != y.len() || rows.is_empty() {
            return Err(invalid("ridge: rows and targets must be non-empty and aligned"));
        }
        if !(alpha > 0.0) {
            return Err(invalid("ridge alpha must be positive"));
        }
        let d = rows[0].len();
        if rows.len() * 4 <= d {
            log::warn!("ridge probe: {} samples for {d} features", rows.len());
        }
        let standardizer = Standardizer::fit(rows)?;
        let std_rows: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
        let x = DMatrix::from_fn(rows.len(), d, |i, j| std_rows[i][j]);
        let intercept = y.iter().sum::<f64>() / y.len() as f64;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - intercept));
        let a = x.transpose() * &x + DMatrix::identity(d, d) * alpha;
        let rhs = x.transpose() * yc;
        let weights = a
            .cholesky()
            .ok_or_else(|| CoreError::Degenerate("ridge normal equations not positive definite".into()))?
            .solve(&rhs);
        Ok(Self {
            standardizer,
            weights,
            intercept,
        })
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        let x = self.standardizer.apply(z);
        self.intercept + x.iter().zip(self.weights.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `n × dims` projected coordinates.
    pub coords: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

/// Projects centred data onto the leading covariance eigenvectors.
pub fn pca_project(rows: &[&[f64]], dims: usize) -> Result<PcaResult> {
    if rows.len() < dims + 1 || dims == 0 {
        return Err(invalid(format!("PCA to {dims} dims needs at least {} samples", dims + 1)));
    }
    let x = matrix(rows)?;
    if dims > x.ncols() {
        return Err(invalid("more components requested than features"));
    }
    let (mean, cov) = mean_and_cov(&x);
    let total = cov.trace();
    if !(total > 0.0) {
        return Err(CoreError::Degenerate("all latents are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comps: Vec<DVector<f64>> = order[..dims].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let coords = rows
        .iter()
        .map(|r| {
            let c = DVector::from_column_slice(r) - &mean;
            comps.iter().map(|v| v.dot(&c)).collect()
        })
        .collect();
    let explained = order[..dims].iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();
    Ok(PcaResult { coords, explained })
}

/// Decodes `z_a + t·(z_b − z_a)` at `steps` evenly spaced `t` in `[0, 1]`.
pub fn latent_interpolate(model: &Cae, z_a: &[f64], z_b: &[f64], steps: usize) -> Result<Vec<GrayImage>> {
    if steps < 2 {
        return Err(invalid("interpolation needs at least two steps"));
    }
    let l = model.config.latent;
    if z_a.len() != l || z_b.len() != l {
        return Err(invalid(format!("latents must have {l} entries")));
    }
    let mut data = Vec::with_capacity(steps * l);
    for s in 0..steps {
        if s == steps - 1 {
            data.extend_from_slice(z_b);
            continue;
        }
        let t = s as f64 / (steps - 1) as f64;
        data.extend(z_a.iter().zip(z_b).map(|(a, b)| a + t * (b - a)));
    }
    let recon = model.decode(&Tensor::new(vec![steps, l], data)?)?;
    (0..steps).map(|i| GrayImage::from_plane(&recon, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteConfidence {
    pub site: String,
    pub seen: bool,
    pub n: usize,
    pub confidence: MeanStd,
    pub entropy: MeanStd,
    /// Fraction classified as their own site (seen sites only).
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub mahalanobis_auroc: f64,
    pub knn_auroc: f64,
    pub tau: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRegression {
    pub site: String,
    pub split: String,
    pub n: usize,
    pub stats: RankStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub held_out: String,
    pub seen_sites: Vec<String>,
    pub seen_accuracy: f64,
    pub confidence: Vec<SiteConfidence>,
    pub ood: OodReport,
    pub qc: Vec<SiteRegression>,
}

/// Per-sample scores kept alongside the report for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub id: String,
    pub site: String,
    pub split: String,
    pub confidence: f64,
    pub entropy: f64,
    pub mahalanobis: f64,
    pub knn: f64,
    pub qc_pred: f64,
}

fn rows_of<'a>(records: &[&'a LatentRecord]) -> Vec<&'a [f64]> {
    records.iter().map(|r| r.z.as_slice()).collect()
}

/// Runs the full battery. Train records fit everything; val records are the
/// in-distribution negatives and seen-site evaluation; test records are the
/// held-out site.
pub fn run_probes(records: &[LatentRecord], held_out: &str) -> Result<(ProbeReport, Vec<ProbeScores>)> {
    let by_split = |s: &str| records.iter().filter(|r| r.split == s).collect::<Vec<_>>();
    let (train, val, test) = (by_split("train"), by_split("val"), by_split("test"));
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(invalid("probes need train, val and test latent records"));
    }
    if let Some(r) = train.iter().chain(&val).find(|r| r.site == held_out) {
        return Err(CoreError::Leakage(format!("`{}` from held-out site in probe training data", r.id)));
    }
    let train_rows = rows_of(&train);
    let labels: Vec<String> = train.iter().map(|r| r.site.clone()).collect();
    let probe = LinearProbe::fit(&train_rows, &labels)?;
    let gauss = GaussianFit::fit(&train_rows)?;
    let targets: Vec<f64> = train.iter().map(|r| r.e_roi).collect();
    let ridge = RidgeModel::fit(&train_rows, &targets, RIDGE_ALPHA)?;

    let eval: Vec<&LatentRecord> = val.iter().chain(&test).copied().collect();
    let mut scores = Vec::with_capacity(eval.len());
    for r in &eval {
        let sm = softmax_stats(&probe.logits(&r.z))?;
        scores.push(ProbeScores {
            id: r.id.clone(),
            site: r.site.clone(),
            split: r.split.clone(),
            confidence: sm.confidence,
            entropy: sm.entropy,
            mahalanobis: gauss.mahalanobis(&r.z)?,
            knn: knn_score(&train_rows, &r.z, KNN_K)?,
            qc_pred: ridge.predict(&r.z),
        });
    }

    let mut sites: Vec<String> = eval.iter().map(|r| r.site.clone()).collect();
    sites.sort();
    sites.dedup();
    let mut confidence = Vec::new();
    let (mut correct, mut seen_total) = (0usize, 0usize);
    for site in &sites {
        let idx: Vec<usize> = (0..eval.len()).filter(|&i| &eval[i].site == site).collect();
        let seen = probe.classes.contains(site);
        let accuracy = seen.then(|| {
            let hits = idx.iter().filter(|&&i| probe.predict(&eval[i].z) == site).count();
            correct += hits;
            seen_total += idx.len();
            hits as f64 / idx.len() as f64
        });
        confidence.push(SiteConfidence {
            site: site.clone(),
            seen,
            n: idx.len(),
            confidence: mean_std(&idx.iter().map(|&i| scores[i].confidence).collect::<Vec<_>>()),
            entropy: mean_std(&idx.iter().map(|&i| scores[i].entropy).collect::<Vec<_>>()),
            accuracy,
        });
    }

    let split_scores = |split: &str, f: fn(&ProbeScores) -> f64| scores.iter().filter(|s| s.split == split).map(f).collect::<Vec<_>>();
    let ood = OodReport {
        mahalanobis_auroc: auroc(&split_scores("test", |s| s.mahalanobis), &split_scores("val", |s| s.mahalanobis))?,
        knn_auroc: auroc(&split_scores("test", |s| s.knn), &split_scores("val", |s| s.knn))?,
        tau: gauss.tau,
        k: KNN_K,
    };

    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in eval.iter().enumerate() {
        groups.entry((r.split.clone(), r.site.clone())).or_default().push(i);
    }
    let mut qc = Vec::new();
    for ((split, site), idx) in groups {
        let y: Vec<f64> = idx.iter().map(|&i| eval[i].e_roi).collect();
        let p: Vec<f64> = idx.iter().map(|&i| scores[i].qc_pred).collect();
        match rank_stats(&y, &p) {
            Ok(stats) => qc.push(SiteRegression { site, split, n: idx.len(), stats }),
            Err(e) => log::warn!("QC probe skipped for {site}/{split}: {e}"),
        }
    }

    let report = ProbeReport {
        held_out: held_out.to_string(),
        seen_sites: probe.classes.clone(),
        seen_accuracy: correct as f64 / seen_total.max(1) as f64,
        confidence,
        ood,
        qc,
    };
    Ok((report, scores))
}
