//! Experiment orchestration: leave-one-site-out protocols, fixed-horizon
//! ablations, probe batteries and report emission.
//!
//! Layout of one protocol run under a runs directory:
//!
//! ```text
//! <protocol>/protocol.json
//! <protocol>/seed-<n>/split.json
//! <protocol>/seed-<n>/{p1,p2}/{config.json,trace.csv,checkpoint.json,metrics.csv}
//! <protocol>/seed-<n>/calibration.json
//! <protocol>/seed-<n>/{latents.csv,probes.json,interpolation.pgm}
//! ablation-<site>/seed-<n>/ablation.csv
//! ablation-<site>/seed-<n>/<subset>/{config.json,trace.csv,calibration.json,metrics.csv}
//! ```
//!
//! Nothing written here carries timestamps or absolute paths, so identical
//! inputs give byte-identical trees.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::losses::LossWeights;
use crate::metrics::{mean_metrics, mean_std, read_metric_csv, write_metric_csv, MeanStd, MetricRecord, METRIC_COLUMNS};
use crate::model::{Cae, CaeConfig, Checkpoint, Phase};
use crate::plot;
use crate::preprocess::Canvas;
use crate::probes::{extract_latents, latent_interpolate, pca_project, read_latents_csv, run_probes, write_latents_csv, LatentRecord, ProbeReport, ProbeScores};
use crate::synth::{make_split, Manifest, SplitPlan};
use crate::train::{
    calibrate_weights, evaluate, train_phase, write_trace_csv, CalibrationReport, Horizon, Objective, PhaseConfig, PhaseRun, PhaseSetup,
    PreparedSet, Terms, TrainConfig,
};

pub const CALIBRATION_SAMPLES: usize = 8;
pub const INTERPOLATION_STEPS: usize = 7;
pub const PRESETS: [&str; 4] = ["hold-out-a", "hold-out-b", "hold-out-c", "dev"];
pub const ABLATION_SUBSETS: [Terms; 4] = [
    Terms { l1: false, edge: false },
    Terms { l1: true, edge: false },
    Terms { l1: false, edge: true },
    Terms { l1: true, edge: true },
];

const SPLITS: [&str; 2] = ["val", "test"];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialise");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn seed_dir_name(seed: u64) -> String {
    format!("seed-{seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub held_out: String,
    /// Seeds, enabled Phase-2 terms and both phase schedules.
    pub config: TrainConfig,
}

impl ProtocolSpec {
    /// `hold-out-{a,b,c}` train on the other two sites with the full
    /// schedule; `dev` holds out the far site with the short schedule and
    /// two seeds.
    pub fn preset(name: &str) -> Result<Self> {
        let (held_out, config) = match name {
            "hold-out-a" => ("A", TrainConfig::default()),
            "hold-out-b" => ("B", TrainConfig::default()),
            "hold-out-c" => ("C", TrainConfig::default()),
            "dev" => (
                "C",
                TrainConfig {
                    seeds: vec![1000, 1001],
                    ..TrainConfig::short_schedule()
                },
            ),
            _ => return Err(invalid(format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")))),
        };
        Ok(Self {
            name: name.to_string(),
            held_out: held_out.to_string(),
            config,
        })
    }

    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        self.config.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid(format!("protocol name `{}` is not a plain directory name", self.name)));
        }
        let sites = manifest.sites();
        if !sites.contains(&self.held_out) {
            return Err(CoreError::UnknownSite(self.held_out.clone()));
        }
        if sites.len() < 2 {
            return Err(invalid("need at least one training site besides the held-out one"));
        }
        Ok(())
    }
}

/// Contents of `config.json` in each phase directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub held_out: String,
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: PhaseConfig,
    /// Set for fixed-horizon runs.
    pub fixed_epochs: Option<usize>,
    pub weights: Option<LossWeights>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub model: CaeConfig,
}

/// One seed of one protocol: the split and the loaded sets.
pub struct SeedContext<'a> {
    pub manifest: &'a Manifest,
    pub config: &'a TrainConfig,
    pub canvas: Canvas,
    pub seed: u64,
    pub split: SplitPlan,
    pub train: PreparedSet,
    pub val: PreparedSet,
    pub test: PreparedSet,
}

impl<'a> SeedContext<'a> {
    pub fn new(manifest: &'a Manifest, config: &'a TrainConfig, held_out: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let canvas = manifest.canvas()?;
        let split = make_split(manifest, held_out, seed)?;
        let load = |ids: &[String]| PreparedSet::new(manifest.load_ids(ids)?, canvas);
        Ok(Self {
            manifest,
            config,
            canvas,
            seed,
            train: load(&split.train)?,
            val: load(&split.val)?,
            test: load(&split.test)?,
            split,
        })
    }

    pub fn held_out(&self) -> &str {
        &self.split.held_out
    }

    pub fn write_split(&self, seed_dir: &Path) -> Result<()> {
        create_dir(seed_dir)?;
        write_json(&seed_dir.join("split.json"), &self.split)
    }

    /// Rejects checkpoints trained under a different held-out site.
    pub fn check_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        match &ck.meta.held_out {
            Some(h) if h != self.held_out() => Err(CoreError::Leakage(format!(
                "checkpoint was trained with `{h}` held out, protocol holds out `{}`",
                self.held_out()
            ))),
            _ => Ok(()),
        }
    }

    /// Metric rows for the validation split and the held-out test split.
    pub fn evaluate(&self, model: &Cae) -> Result<Vec<MetricRecord>> {
        let mut rows = evaluate(model, &self.val, "val", self.config.batch_size)?;
        rows.extend(evaluate(model, &self.test, "test", self.config.batch_size)?);
        Ok(rows)
    }

    fn run_phase(&self, init: &Cae, phase: Phase, objective: Objective, horizon: Horizon) -> Result<PhaseRun> {
        let setup = PhaseSetup {
            phase,
            objective,
            config: self.config.phase(phase),
            batch_size: self.config.batch_size,
            seed: self.seed,
            horizon,
        };
        let mut run = train_phase(init, &self.train, &self.val, &setup)?;
        run.checkpoint.meta.held_out = Some(self.held_out().to_string());
        Ok(run)
    }

    fn write_phase(&self, dir: &Path, run: &PhaseRun, horizon: Horizon, save_checkpoint: bool) -> Result<Vec<MetricRecord>> {
        create_dir(dir)?;
        let record = PhaseRecord {
            phase: run.checkpoint.phase,
            held_out: self.held_out().to_string(),
            seed: self.seed,
            batch_size: self.config.batch_size,
            schedule: self.config.phase(run.checkpoint.phase).clone(),
            fixed_epochs: match horizon {
                Horizon::Fixed(n) => Some(n),
                Horizon::EarlyStop => None,
            },
            weights: run.checkpoint.meta.weights,
            epochs_run: run.trace.len(),
            best_epoch: run.best_epoch,
            model: run.checkpoint.model.config.clone(),
        };
        write_json(&dir.join("config.json"), &record)?;
        write_trace_csv(&dir.join("trace.csv"), &run.trace)?;
        if save_checkpoint {
            run.checkpoint.save(&dir.join("checkpoint.json"))?;
        }
        let rows = self.evaluate(&run.checkpoint.model)?;
        write_metric_csv(&dir.join("metrics.csv"), &rows)?;
        Ok(rows)
    }

    /// Phase 1 from a fresh initialisation; artifacts go to `dir`.
    pub fn train_p1(&self, dir: &Path) -> Result<Checkpoint> {
        let init = Cae::new(self.config.model.config(self.canvas), self.seed)?;
        let run = self.run_phase(&init, Phase::P1, Objective::Phase1, Horizon::EarlyStop)?;
        log::info!("{} seed {}: P1 stopped after {} epochs (best {})", self.held_out(), self.seed, run.trace.len(), run.best_epoch);
        self.write_phase(dir, &run, Horizon::EarlyStop, true)?;
        Ok(run.checkpoint)
    }

    /// Gradient-norm calibration on the first validation samples.
    pub fn calibrate(&self, p1: &Checkpoint, terms: Terms) -> Result<CalibrationReport> {
        self.check_checkpoint(p1)?;
        calibrate_weights(p1, &self.val.head(CALIBRATION_SAMPLES), terms, self.config.calibration)
    }

    pub fn train_p2(&self, p1: &Checkpoint, weights: LossWeights, dir: &Path) -> Result<Checkpoint> {
        self.check_checkpoint(p1)?;
        if p1.phase != Phase::P1 {
            return Err(invalid("Phase 2 must start from a Phase-1 checkpoint"));
        }
        let run = self.run_phase(&p1.model, Phase::P2, Objective::Phase2(weights), Horizon::EarlyStop)?;
        log::info!("{} seed {}: P2 stopped after {} epochs (best {})", self.held_out(), self.seed, run.trace.len(), run.best_epoch);
        self.write_phase(dir, &run, Horizon::EarlyStop, true)?;
        Ok(run.checkpoint)
    }

    /// Extracts frozen latents for every split, runs the probe battery and
    /// renders a seen-to-held-out interpolation strip.
    pub fn probe(&self, model: &Checkpoint, seed_dir: &Path) -> Result<ProbeReport> {
        self.check_checkpoint(model)?;
        create_dir(seed_dir)?;
        let m = &model.model;
        let b = self.config.batch_size;
        let mut records = extract_latents(m, &self.train, "train", b)?;
        records.extend(extract_latents(m, &self.val, "val", b)?);
        records.extend(extract_latents(m, &self.test, "test", b)?);
        write_latents_csv(&seed_dir.join("latents.csv"), &records)?;
        let (report, scores) = run_probes(&records, self.held_out())?;
        write_json(
            &seed_dir.join("probes.json"),
            &ProbeOutput {
                report: report.clone(),
                scores,
            },
        )?;
        let a = &self.val.samples[0];
        let z_of = |id: &str| records.iter().find(|r| r.id == id).map(|r| r.z.clone()).expect("record for every sample");
        let z = &self.test.samples[0];
        let mut frames = vec![a.image.clone()];
        frames.extend(latent_interpolate(m, &z_of(&a.id), &z_of(&z.id), INTERPOLATION_STEPS)?);
        frames.push(z.image.clone());
        plot::image_strip(&frames, &seed_dir.join("interpolation.pgm"))?;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub report: ProbeReport,
    pub scores: Vec<ProbeScores>,
}

/// Full per-seed pipeline: split, P1, calibration, P2, probes.
pub fn run_seed(spec: &ProtocolSpec, manifest: &Manifest, seed: u64, seed_dir: &Path) -> Result<()> {
    let ctx = SeedContext::new(manifest, &spec.config, &spec.held_out, seed)?;
    ctx.write_split(seed_dir)?;
    let p1 = ctx.train_p1(&seed_dir.join("p1"))?;
    let cal = ctx.calibrate(&p1, spec.config.terms)?;
    write_json(&seed_dir.join("calibration.json"), &cal)?;
    let p2 = ctx.train_p2(&p1, cal.weights, &seed_dir.join("p2"))?;
    ctx.probe(&p2, seed_dir)?;
    Ok(())
}

/// Runs every seed of `spec` under `runs_dir/<name>` and loads the result.
pub fn run_protocol(spec: &ProtocolSpec, manifest: &Manifest, runs_dir: &Path) -> Result<ProtocolFragment> {
    spec.validate(manifest)?;
    let dir = runs_dir.join(&spec.name);
    create_dir(&dir)?;
    write_json(&dir.join("protocol.json"), spec)?;
    for &seed in &spec.config.seeds {
        run_seed(spec, manifest, seed, &dir.join(seed_dir_name(seed))).map_err(|e| e.context(format!("protocol `{}` seed {seed}", spec.name)))?;
    }
    load_fragment(&dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub held_out: String,
    pub subsets: Vec<Terms>,
    pub horizon: usize,
    pub config: TrainConfig,
}

impl AblationSpec {
    pub fn new(held_out: &str, config: TrainConfig) -> Self {
        Self {
            held_out: held_out.to_string(),
            subsets: ABLATION_SUBSETS.to_vec(),
            horizon: config.ablation_horizon,
            config,
        }
    }
}

pub fn subset_dir_name(t: Terms) -> &'static str {
    match (t.l1, t.edge) {
        (false, false) => "none",
        (true, false) => "l1",
        (false, true) => "edge",
        (true, true) => "l1-edge",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub seed: u64,
    pub split: String,
    pub weights: LossWeights,
    pub metrics: [f64; 5],
}

const ABLATION_HEADER: &str = "subset,seed,split,lambda_glob,lambda_l1,lambda_edge,psnr,ms_ssim,roi_mae,roi_ms_ssim,roi_edge_mae";

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{ABLATION_HEADER}").expect("in-memory write");
    for r in rows {
        let [g, l, e] = r.weights.as_array();
        let m = r.metrics.map(|v| v.to_string()).join(",");
        writeln!(out, "{},{},{},{g},{l},{e},{m}", r.subset, r.seed, r.split).expect("in-memory write");
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |detail: String| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(corrupt("unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(corrupt(format!("row {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("row {}: {e}", i + 2)));
            Ok(AblationRow {
                subset: f[0].to_string(),
                seed: f[1].parse().map_err(|e| corrupt(format!("row {}: {e}", i + 2)))?,
                split: f[2].to_string(),
                weights: LossWeights::new(num(f[3])?, num(f[4])?, num(f[5])?)?,
                metrics: [num(f[6])?, num(f[7])?, num(f[8])?, num(f[9])?, num(f[10])?],
            })
        })
        .collect()
}

/// Every subset starts from the same Phase-1 checkpoint and trains for a
/// fixed horizon. `shared_p1` overrides the per-seed checkpoint; otherwise an
/// existing `p1/checkpoint.json` in the seed directory is reused, or trained.
/// Validation rows drive selection; test rows are a report-only echo.
pub fn run_ablation(spec: &AblationSpec, manifest: &Manifest, runs_dir: &Path, shared_p1: Option<&Path>) -> Result<Vec<AblationRow>> {
    if spec.subsets.is_empty() || spec.horizon == 0 {
        return Err(invalid("ablation needs at least one subset and a positive horizon"));
    }
    let dir = runs_dir.join(format!("ablation-{}", spec.held_out));
    let mut all = Vec::new();
    for &seed in &spec.config.seeds {
        let run = || -> Result<Vec<AblationRow>> {
            let ctx = SeedContext::new(manifest, &spec.config, &spec.held_out, seed)?;
            let seed_dir = dir.join(seed_dir_name(seed));
            ctx.write_split(&seed_dir)?;
            let p1_path = seed_dir.join("p1").join("checkpoint.json");
            let p1 = match shared_p1 {
                Some(p) => Checkpoint::load(p)?,
                None if p1_path.exists() => Checkpoint::load(&p1_path)?,
                None => ctx.train_p1(&seed_dir.join("p1"))?,
            };
            let mut rows = Vec::new();
            for &terms in &spec.subsets {
                let cal = ctx.calibrate(&p1, terms)?;
                let sub = seed_dir.join(subset_dir_name(terms));
                let horizon = Horizon::Fixed(spec.horizon);
                let run = ctx.run_phase(&p1.model, Phase::P2, Objective::Phase2(cal.weights), horizon)?;
                let metrics = ctx.write_phase(&sub, &run, horizon, false)?;
                write_json(&sub.join("calibration.json"), &cal)?;
                for split in SPLITS {
                    let subset: Vec<MetricRecord> = metrics.iter().filter(|r| r.split == split).cloned().collect();
                    rows.push(AblationRow {
                        subset: terms.label().to_string(),
                        seed,
                        split: split.to_string(),
                        weights: cal.weights,
                        metrics: mean_metrics(&subset),
                    });
                }
            }
            write_ablation_csv(&seed_dir.join("ablation.csv"), &rows)?;
            Ok(rows)
        };
        all.extend(run().map_err(|e| e.context(format!("ablation holding out `{}` seed {seed}", spec.held_out)))?);
    }
    Ok(all)
}

/// Artifacts of one seed as read back from disk.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub dir: PathBuf,
    pub split: SplitPlan,
    pub p1: Vec<MetricRecord>,
    pub p2: Option<Vec<MetricRecord>>,
    pub calibration: Option<CalibrationReport>,
    pub probes: Option<ProbeOutput>,
}

#[derive(Clone, Debug)]
pub struct ProtocolFragment {
    pub name: String,
    pub held_out: String,
    pub seeds: Vec<SeedArtifacts>,
}

#[derive(Clone, Debug)]
pub struct AblationFragment {
    pub held_out: String,
    pub rows: Vec<AblationRow>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn seed_of(path: &Path) -> Option<u64> {
    path.file_name()?.to_str()?.strip_prefix("seed-")?.parse().ok()
}

fn leak(msg: String) -> CoreError {
    CoreError::Leakage(msg)
}

/// Runtime leave-one-site-out check over every artifact of one seed.
fn check_seed_hygiene(a: &SeedArtifacts, latents: Option<&[LatentRecord]>) -> Result<()> {
    let s = &a.split;
    let test: std::collections::HashSet<&str> = s.test.iter().map(String::as_str).collect();
    if let Some(id) = s.train.iter().chain(&s.val).find(|id| test.contains(id.as_str())) {
        return Err(leak(format!("test sample `{id}` listed in train/val")));
    }
    let rows = a.p1.iter().chain(a.p2.iter().flatten());
    for r in rows {
        if r.split != "test" && (r.site == s.held_out || test.contains(r.id.as_str())) {
            return Err(leak(format!("`{}` evaluated as {} sample", r.id, r.split)));
        }
    }
    if let Some(cal) = &a.calibration {
        if let Some(id) = cal.batch_ids.iter().find(|id| test.contains(id.as_str())) {
            return Err(leak(format!("calibration batch contains test sample `{id}`")));
        }
    }
    for r in latents.into_iter().flatten() {
        if r.split != "test" && (r.site == s.held_out || test.contains(r.id.as_str())) {
            return Err(leak(format!("latent `{}` stored under split {}", r.id, r.split)));
        }
    }
    Ok(())
}

fn load_seed(dir: &Path, seed: u64) -> Result<SeedArtifacts> {
    let opt = |p: PathBuf| p.exists().then_some(p);
    let split: SplitPlan = read_json(&dir.join("split.json"))?;
    let a = SeedArtifacts {
        seed,
        dir: dir.to_path_buf(),
        p1: read_metric_csv(&dir.join("p1").join("metrics.csv"))?,
        p2: opt(dir.join("p2").join("metrics.csv")).map(|p| read_metric_csv(&p)).transpose()?,
        calibration: opt(dir.join("calibration.json")).map(|p| read_json(&p)).transpose()?,
        probes: opt(dir.join("probes.json")).map(|p| read_json(&p)).transpose()?,
        split,
    };
    let latents = opt(dir.join("latents.csv")).map(|p| read_latents_csv(&p)).transpose()?;
    check_seed_hygiene(&a, latents.as_deref())?;
    Ok(a)
}

/// Reads every `seed-*` directory of a protocol directory.
pub fn load_fragment(dir: &Path) -> Result<ProtocolFragment> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid(format!("{} is not a protocol directory", dir.display())))?
        .to_string();
    let mut seeds = Vec::new();
    for sub in sorted_subdirs(dir)? {
        if let Some(seed) = seed_of(&sub) {
            if sub.join("p1").join("metrics.csv").exists() {
                seeds.push(load_seed(&sub, seed)?);
            }
        }
    }
    seeds.sort_by_key(|s| s.seed);
    let held_out = seeds
        .first()
        .map(|s| s.split.held_out.clone())
        .ok_or_else(|| invalid(format!("no completed seeds under {}", dir.display())))?;
    if let Some(s) = seeds.iter().find(|s| s.split.held_out != held_out) {
        return Err(invalid(format!("seed {} of `{name}` holds out `{}`, others `{held_out}`", s.seed, s.split.held_out)));
    }
    Ok(ProtocolFragment { name, held_out, seeds })
}

/// Scans a runs directory for protocol and ablation directories.
pub fn collect_runs(runs_dir: &Path) -> Result<(Vec<ProtocolFragment>, Vec<AblationFragment>)> {
    let (mut protocols, mut ablations) = (Vec::new(), Vec::new());
    for dir in sorted_subdirs(runs_dir)? {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(site) = name.strip_prefix("ablation-") {
            let mut rows = Vec::new();
            for sub in sorted_subdirs(&dir)? {
                let csv = sub.join("ablation.csv");
                if seed_of(&sub).is_some() && csv.exists() {
                    rows.extend(read_ablation_csv(&csv)?);
                }
            }
            if !rows.is_empty() {
                ablations.push(AblationFragment {
                    held_out: site.to_string(),
                    rows,
                });
            }
        } else if sorted_subdirs(&dir)?.iter().any(|s| seed_of(s).is_some()) {
            protocols.push(load_fragment(&dir)?);
        }
    }
    if protocols.is_empty() && ablations.is_empty() {
        return Err(invalid(format!("no runs found under {}", runs_dir.display())));
    }
    Ok((protocols, ablations))
}

/// How a metric's P1→P2 change is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaKind {
    /// `100·(P2 − P1)/P1`, negative when the error shrinks.
    RelativePercent,
    /// `P2 − P1` in dB.
    Decibel,
    /// `P2 − P1`.
    Absolute,
}

pub fn delta_kind(metric: usize) -> DeltaKind {
    match METRIC_COLUMNS[metric] {
        "psnr" => DeltaKind::Decibel,
        "roi_mae" | "roi_edge_mae" => DeltaKind::RelativePercent,
        _ => DeltaKind::Absolute,
    }
}

/// `None` for a relative delta against a zero baseline.
pub fn metric_delta(kind: DeltaKind, p1: f64, p2: f64) -> Option<f64> {
    match kind {
        DeltaKind::RelativePercent if p1 == 0.0 => None,
        DeltaKind::RelativePercent => Some(100.0 * (p2 - p1) / p1),
        DeltaKind::Decibel | DeltaKind::Absolute => Some(p2 - p1),
    }
}

pub fn format_delta(kind: DeltaKind, delta: Option<f64>) -> String {
    // normalise −0.0 so identical metrics print as +0
    let Some(d) = delta.map(|d| if d == 0.0 { 0.0 } else { d }) else {
        return "n/a".into();
    };
    match kind {
        DeltaKind::RelativePercent => format!("{d:+.2}%"),
        DeltaKind::Decibel => format!("{d:+.2} dB"),
        DeltaKind::Absolute => format!("{d:+.4}"),
    }
}

fn fmt_std(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

/// Per-seed metric means for one phase and split, in seed order.
fn seed_means(f: &ProtocolFragment, phase: Phase, split: &str) -> Vec<[f64; 5]> {
    f.seeds
        .iter()
        .filter_map(|s| {
            let rows = match phase {
                Phase::P1 => Some(&s.p1),
                Phase::P2 => s.p2.as_ref(),
            }?;
            let rows: Vec<MetricRecord> = rows.iter().filter(|r| r.split == split).cloned().collect();
            (!rows.is_empty()).then(|| mean_metrics(&rows))
        })
        .collect()
}

fn column_stats(per_seed: &[[f64; 5]]) -> [MeanStd; 5] {
    std::array::from_fn(|k| mean_std(&per_seed.iter().map(|m| m[k]).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub protocol: String,
    pub split: String,
    pub metric: String,
    pub p1: f64,
    pub p2: f64,
    pub delta: Option<f64>,
    pub formatted: String,
}

/// Deltas of seed-averaged means, computed only from the per-seed metric rows.
pub fn compute_deltas(fragments: &[ProtocolFragment]) -> Vec<DeltaRow> {
    let mut rows = Vec::new();
    for f in fragments {
        for split in SPLITS {
            let (a, b) = (seed_means(f, Phase::P1, split), seed_means(f, Phase::P2, split));
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let (a, b) = (column_stats(&a), column_stats(&b));
            for k in 0..5 {
                let kind = delta_kind(k);
                let d = metric_delta(kind, a[k].mean, b[k].mean);
                rows.push(DeltaRow {
                    protocol: f.name.clone(),
                    split: split.to_string(),
                    metric: METRIC_COLUMNS[k].to_string(),
                    p1: a[k].mean,
                    p2: b[k].mean,
                    delta: d,
                    formatted: format_delta(kind, d),
                });
            }
        }
    }
    rows
}

const DELTA_HEADER: &str = "protocol,split,metric,p1,p2,delta,formatted";

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn table3_rows(fragments: &[ProtocolFragment]) -> Vec<String> {
    let mut rows = Vec::new();
    for f in fragments {
        for phase in [Phase::P1, Phase::P2] {
            for split in SPLITS {
                let per_seed = seed_means(f, phase, split);
                if per_seed.is_empty() {
                    continue;
                }
                let cols: Vec<String> = column_stats(&per_seed).iter().map(|s| format!("{},{}", s.mean, fmt_std(s.std))).collect();
                rows.push(format!("{},{},{phase},{split},{},{}", f.name, f.held_out, per_seed.len(), cols.join(",")));
            }
        }
    }
    rows
}

fn ablation_rows(ablations: &[AblationFragment]) -> Vec<String> {
    let mut rows = Vec::new();
    for a in ablations {
        let mut groups: Vec<((String, String), Vec<&AblationRow>)> = Vec::new();
        for r in &a.rows {
            let key = (r.subset.clone(), r.split.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        for ((subset, split), rs) in groups {
            let per_seed: Vec<[f64; 5]> = rs.iter().map(|r| r.metrics).collect();
            let lambda = rs[0].weights.as_array().map(|v| v.to_string()).join(",");
            let cols: Vec<String> = column_stats(&per_seed).iter().map(|s| format!("{},{}", s.mean, fmt_std(s.std))).collect();
            let role = if split == "val" { "selection" } else { "report-only" };
            rows.push(format!("{},{subset},{split},{role},{},{lambda},{}", a.held_out, rs.len(), cols.join(",")));
        }
    }
    rows
}

fn metric_header(prefix: &str) -> String {
    let cols: Vec<String> = METRIC_COLUMNS.iter().map(|m| format!("{m}_mean,{m}_std")).collect();
    format!("{prefix},{}", cols.join(","))
}

#[derive(Serialize)]
struct ProbeEntry<'a> {
    protocol: &'a str,
    seed: u64,
    report: &'a ProbeReport,
}

fn probe_tables(fragments: &[ProtocolFragment], out: &Path) -> Result<()> {
    let (mut entries, mut t4, mut t5, mut t6) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in fragments {
        for s in &f.seeds {
            let Some(p) = &s.probes else { continue };
            let r = &p.report;
            entries.push(ProbeEntry {
                protocol: &f.name,
                seed: s.seed,
                report: r,
            });
            for c in &r.confidence {
                t4.push(format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    f.name,
                    s.seed,
                    c.site,
                    if c.seen { "seen" } else { "held-out" },
                    c.n,
                    c.confidence.mean,
                    fmt_std(c.confidence.std),
                    c.entropy.mean,
                    fmt_std(c.entropy.std),
                    c.accuracy.map_or_else(|| "n/a".to_string(), |a| a.to_string())
                ));
            }
            t5.push(format!(
                "{},{},{},{},{},{},{}",
                f.name, s.seed, r.held_out, r.ood.mahalanobis_auroc, r.ood.knn_auroc, r.ood.tau, r.ood.k
            ));
            for q in &r.qc {
                t6.push(format!("{},{},{},{},{},{},{}", f.name, s.seed, q.site, q.split, q.n, q.stats.r2, q.stats.spearman));
            }
        }
    }
    if entries.is_empty() {
        return Ok(());
    }
    write_json(&out.join("probes.json"), &entries)?;
    write_csv(
        &out.join("probe_confidence.csv"),
        "protocol,seed,site,status,n,confidence_mean,confidence_std,entropy_mean,entropy_std,accuracy",
        &t4,
    )?;
    write_csv(&out.join("probe_ood.csv"), "protocol,seed,held_out,mahalanobis_auroc,knn_auroc,tau,k", &t5)?;
    write_csv(&out.join("probe_qc.csv"), "protocol,seed,site,split,n,r2,spearman", &t6)
}

fn protocol_plots(f: &ProtocolFragment, plots: &Path) -> Result<()> {
    let Some(s) = f.seeds.iter().find(|s| s.probes.is_some()) else {
        return Ok(());
    };
    let scores = &s.probes.as_ref().expect("filtered above").scores;
    let mut sites: Vec<&str> = scores.iter().map(|p| p.site.as_str()).collect();
    sites.sort();
    sites.dedup();
    let by_site: Vec<Vec<f64>> = sites.iter().map(|site| scores.iter().filter(|p| p.site == *site).map(|p| p.confidence).collect()).collect();
    plot::histogram(&by_site, 20, &plots.join(format!("{}-confidence.ppm", f.name)))?;
    for (label, get) in [("mahalanobis", (|p: &ProbeScores| p.mahalanobis) as fn(&ProbeScores) -> f64), ("knn", |p| p.knn)] {
        let groups: Vec<Vec<f64>> = SPLITS.iter().map(|sp| scores.iter().filter(|p| p.split == *sp).map(get).collect()).collect();
        plot::histogram(&groups, 20, &plots.join(format!("{}-ood-{label}.ppm", f.name)))?;
    }
    let latents_path = s.dir.join("latents.csv");
    if latents_path.exists() {
        let latents = read_latents_csv(&latents_path)?;
        let rows: Vec<&[f64]> = latents.iter().map(|r| r.z.as_slice()).collect();
        match pca_project(&rows, 2) {
            Ok(pca) => {
                let mut all_sites: Vec<&str> = latents.iter().map(|r| r.site.as_str()).collect();
                all_sites.sort();
                all_sites.dedup();
                let pts: Vec<(f64, f64, usize)> = latents
                    .iter()
                    .zip(&pca.coords)
                    .map(|(r, c)| (c[0], c[1], all_sites.iter().position(|x| *x == r.site).unwrap_or(0)))
                    .collect();
                plot::scatter(&pts, &plots.join(format!("{}-pca.ppm", f.name)))?;
                let explained = pca.explained.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                write_csv(&plots.join(format!("{}-pca-explained.csv", f.name)), "pc1,pc2", &[explained])?;
            }
            Err(e) => log::warn!("PCA plot skipped for `{}`: {e}", f.name),
        }
    }
    let strip = s.dir.join("interpolation.pgm");
    if strip.exists() {
        let dest = plots.join(format!("{}-interpolation.pgm", f.name));
        fs::copy(&strip, &dest).map_err(io_err(&dest))?;
    }
    Ok(())
}

fn parse_delta_csv(path: &Path) -> Result<Vec<(String, String, String, Option<f64>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |detail: String| CoreError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(DELTA_HEADER) {
        return Err(corrupt("unexpected header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(corrupt(format!("row `{line}` has {} fields", f.len())));
            }
            let d = match f[5] {
                "n/a" => None,
                v => Some(v.parse::<f64>().map_err(|e| corrupt(e.to_string()))?),
            };
            Ok((f[0].to_string(), f[1].to_string(), f[2].to_string(), d))
        })
        .collect()
}

/// Recomputes every delta from the per-seed metric CSVs on disk and compares
/// it with what `deltas.csv` claims.
pub fn cross_check(fragments: &[ProtocolFragment], out: &Path) -> Result<()> {
    let reloaded = fragments
        .iter()
        .map(|f| {
            let dir = f.seeds.first().and_then(|s| s.dir.parent()).ok_or_else(|| invalid("fragment without seeds"))?;
            load_fragment(dir)
        })
        .collect::<Result<Vec<_>>>()?;
    let fresh = compute_deltas(&reloaded);
    let written = parse_delta_csv(&out.join("deltas.csv"))?;
    if fresh.len() != written.len() {
        return Err(CoreError::Degenerate(format!("deltas.csv has {} rows, metrics imply {}", written.len(), fresh.len())));
    }
    for (a, (p, s, m, d)) in fresh.iter().zip(&written) {
        let same_key = (&a.protocol, &a.split, &a.metric) == (p, s, m);
        let same_value = match (a.delta, d) {
            (None, None) => true,
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
            _ => false,
        };
        if !same_key || !same_value {
            return Err(CoreError::Degenerate(format!("delta {p}/{s}/{m} = {d:?} disagrees with recomputed {:?}", a.delta)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub files: Vec<String>,
}

/// Writes the metric table, ablation table, probe tables, aggregate deltas and
/// plots into `out`, then cross-checks the deltas against the seed CSVs.
pub fn emit_report(fragments: &[ProtocolFragment], ablations: &[AblationFragment], out: &Path) -> Result<ReportFiles> {
    if fragments.is_empty() && ablations.is_empty() {
        return Err(invalid("nothing to report"));
    }
    let plots = out.join("plots");
    create_dir(&plots)?;
    if !fragments.is_empty() {
        write_csv(&out.join("metrics_table.csv"), &metric_header("protocol,held_out,phase,split,seeds"), &table3_rows(fragments))?;
        let deltas: Vec<String> = compute_deltas(fragments)
            .iter()
            .map(|d| {
                let v = d.delta.map_or_else(|| "n/a".to_string(), |v| v.to_string());
                format!("{},{},{},{},{},{v},{}", d.protocol, d.split, d.metric, d.p1, d.p2, d.formatted)
            })
            .collect();
        write_csv(&out.join("deltas.csv"), DELTA_HEADER, &deltas)?;
        probe_tables(fragments, out)?;
        for f in fragments {
            protocol_plots(f, &plots)?;
        }
        cross_check(fragments, out)?;
    }
    if !ablations.is_empty() {
        write_csv(
            &out.join("ablation_table.csv"),
            &metric_header("held_out,subset,split,role,seeds,lambda_glob,lambda_l1,lambda_edge"),
            &ablation_rows(ablations),
        )?;
    }
    let mut files = Vec::new();
    for dir in [out.to_path_buf(), plots] {
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.path().strip_prefix(out).ok().map(|p| p.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        files.extend(names);
    }
    Ok(ReportFiles { files })
}

/// Mean of per-seed metric means, for acceptance-style summaries.
pub fn phase_means(f: &ProtocolFragment, phase: Phase, split: &str) -> Option<[f64; 5]> {
    let per_seed = seed_means(f, phase, split);
    (!per_seed.is_empty()).then(|| column_stats(&per_seed).map(|s| s.mean))
}

/// Loads a checkpoint together with the split it was trained under.
pub fn checkpoint_context<'a>(
    manifest: &'a Manifest,
    config: &'a TrainConfig,
    checkpoint: &Path,
    held_out: Option<&str>,
) -> Result<(Checkpoint, SeedContext<'a>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let site = match (held_out, ck.meta.held_out.as_deref()) {
        (Some(h), _) => h.to_string(),
        (None, Some(h)) => h.to_string(),
        (None, None) => return Err(invalid("checkpoint does not record its held-out site; pass one explicitly")),
    };
    let ctx = SeedContext::new(manifest, config, &site, ck.meta.seed)?;
    ctx.check_checkpoint(&ck)?;
    Ok((ck, ctx))
}
