//! Loss-weight calibration, early stopping and the two-phase training loop.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use roicae_numerics::{grad_global_norm, AdamConfig, AdamState, Graph, Rng, Stream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::image::{batch_tensor, GrayImage};
use crate::losses::{self, mask_batch, LossWeights, RoiMask};
use crate::metrics::{image_metrics, MetricRecord};
use crate::model::{Cae, CaeConfig, Checkpoint, CheckpointMeta, Phase};
use crate::preprocess::Canvas;
use crate::synth::Sample;

pub const MIN_CALIBRATION_BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub l1: bool,
    pub edge: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { l1: true, edge: true };

    /// Enabled flags for `(glob, l1, edge)`; the global anchor is always on.
    pub fn enabled(&self) -> [bool; 3] {
        [true, self.l1, self.edge]
    }

    pub fn label(&self) -> &'static str {
        match (self.l1, self.edge) {
            (false, false) => "none",
            (true, false) => "+L1",
            (false, true) => "+edge",
            (true, true) => "+L1+edge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// `λ_k ∝ 1/ḡ_k`, normalised to sum to one.
    Normalized,
    /// `λ_glob = 1`, other terms scaled to match its gradient magnitude.
    PinGlobal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWidths {
    pub channels: [usize; 4],
    pub bottleneck: usize,
    pub latent: usize,
}

impl ModelWidths {
    pub fn config(&self, canvas: Canvas) -> CaeConfig {
        CaeConfig {
            channels: self.channels,
            bottleneck: self.bottleneck,
            latent: self.latent,
            ..CaeConfig::scaled(canvas)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub p1: PhaseConfig,
    pub p2: PhaseConfig,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub terms: Terms,
    pub ablation_horizon: usize,
    pub calibration: CalibrationMode,
    pub model: ModelWidths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p1: PhaseConfig {
                lr: 1e-4,
                max_epochs: 250,
                patience: 5,
                min_delta: 2e-5,
            },
            p2: PhaseConfig {
                lr: 1e-5,
                max_epochs: 250,
                patience: 7,
                min_delta: 5e-5,
            },
            batch_size: 8,
            seeds: (1000..=1004).collect(),
            terms: Terms::ALL,
            ablation_horizon: 15,
            calibration: CalibrationMode::Normalized,
            model: ModelWidths {
                channels: [8, 16, 32, 64],
                bottleneck: 64,
                latent: 128,
            },
        }
    }
}

impl TrainConfig {
    /// Epoch caps of 150 (Phase 1) and 100 (Phase 2) instead of 250/250.
    pub fn short_schedule() -> Self {
        let mut c = Self::default();
        c.p1.max_epochs = 150;
        c.p2.max_epochs = 100;
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", &self.p1), ("p2", &self.p2)] {
            if !(p.lr > 0.0) || p.patience < 1 || p.max_epochs < 1 || !(p.min_delta >= 0.0) {
                return Err(invalid(format!("{name}: lr must be > 0, patience and max_epochs >= 1, min_delta >= 0")));
            }
        }
        if self.batch_size < 1 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seed list is empty"));
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::P1 => &self.p1,
            Phase::P2 => &self.p2,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CoreError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Samples with their rasterised masks, ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub samples: Vec<Sample>,
    pub masks: Vec<RoiMask>,
}

impl PreparedSet {
    pub fn new(samples: Vec<Sample>, canvas: Canvas) -> Result<Self> {
        let masks = samples
            .iter()
            .map(|s| RoiMask::from_box(&s.roi, canvas))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, masks })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Rc<Tensor>)> {
        let x = batch_tensor(idx.iter().map(|&i| &self.samples[i].image))?;
        let m = mask_batch(idx.iter().map(|&i| &self.masks[i]))?;
        Ok((x, m))
    }

    /// The first `n` samples, in order.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            samples: self.samples[..n].to_vec(),
            masks: self.masks[..n].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Phase1,
    Phase2(LossWeights),
}

/// Per-sample objective values for a batch on `g`.
fn objective_node(
    model: &Cae,
    g: &mut Graph,
    trainable: bool,
    x: Tensor,
    mask: Rc<Tensor>,
    objective: &Objective,
) -> Result<roicae_numerics::Var> {
    let p = model.bind(g, trainable);
    let xv = g.constant(x);
    let f = model.forward(g, &p, xv)?;
    match objective {
        Objective::Phase1 => losses::phase1_loss(g, xv, f.recon),
        Objective::Phase2(w) => losses::phase2_total(g, xv, f.recon, mask, w),
    }
}

/// Mean objective over a whole set, without gradients.
pub fn evaluate_objective(model: &Cae, set: &PreparedSet, objective: &Objective, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(invalid("cannot evaluate on an empty set"));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, m) = set.batch(chunk)?;
        let mut g = Graph::new();
        let per = objective_node(model, &mut g, false, x, m, objective)?;
        total += g.value(per).sum();
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub epochs_seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopState {
    /// Improvement iff `val < best − min_delta`; stop once the count of
    /// non-improving epochs reaches `patience`.
    pub fn update(&mut self, val: f64, patience: usize, min_delta: f64) -> StopDecision {
        self.epochs_seen += 1;
        let improved = match self.best {
            None => true,
            Some(b) => val < b - min_delta,
        };
        if improved {
            self.best = Some(val);
            self.best_epoch = self.epochs_seen;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.since_improvement >= patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stopped: bool,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,val_loss,stopped_flag").expect("in-memory write");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, u8::from(r.stopped)).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// Up to the phase's `max_epochs`, keeping the best validation epoch.
    EarlyStop,
    /// Exactly this many epochs, keeping the final parameters.
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub struct PhaseRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
}

pub struct PhaseSetup<'a> {
    pub phase: Phase,
    pub objective: Objective,
    pub config: &'a PhaseConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub horizon: Horizon,
}

fn shuffle_index(phase: Phase, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::P1 => 1u64,
        Phase::P2 => 2u64,
    };
    (tag << 32) | epoch as u64
}

/// Adam on the phase objective with per-epoch seeded shuffling.
pub fn train_phase(init: &Cae, train: &PreparedSet, val: &PreparedSet, setup: &PhaseSetup) -> Result<PhaseRun> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    if setup.phase == Phase::P2 && setup.objective == Objective::Phase1 {
        log::warn!("Phase 2 run with the Phase-1 objective");
    }
    let mut model = init.clone();
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(setup.config.lr))?;
    let epochs = match setup.horizon {
        Horizon::EarlyStop => setup.config.max_epochs,
        Horizon::Fixed(n) => n,
    };
    let mut stop_state = EarlyStopState::default();
    let mut best = model.clone();
    let mut trace = Vec::new();
    let weights = match setup.objective {
        Objective::Phase1 => None,
        Objective::Phase2(w) => Some(w),
    };

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::substream(setup.seed, Stream::Shuffle, shuffle_index(setup.phase, epoch)).shuffle(&mut order);
        let mut train_total = 0.0;
        for (bi, chunk) in order.chunks(setup.batch_size).enumerate() {
            let (x, m) = train.batch(chunk)?;
            let mut g = Graph::new();
            let per = objective_node(&model, &mut g, true, x, m, &setup.objective)?;
            let loss = g.mean(per);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, batch: bi + 1 });
            }
            train_total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut model.params, &grads)?;
        }
        let val_loss = evaluate_objective(&model, val, &setup.objective, setup.batch_size)?;
        if !val_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { epoch, batch: 0 });
        }
        let decision = stop_state.update(val_loss, setup.config.patience, setup.config.min_delta);
        let stopping = setup.horizon == Horizon::EarlyStop && decision.stop;
        if decision.improved && setup.horizon == Horizon::EarlyStop {
            best = model.clone();
        }
        log::debug!("{} epoch {epoch}: train {:.6} val {val_loss:.6}", setup.phase, train_total / train.len() as f64);
        trace.push(TraceRow {
            epoch,
            train_loss: train_total / train.len() as f64,
            val_loss,
            stopped: stopping,
        });
        if stopping {
            break;
        }
    }
    let (model, best_epoch) = match setup.horizon {
        Horizon::EarlyStop => (best, stop_state.best_epoch),
        Horizon::Fixed(_) => (model, trace.len()),
    };
    Ok(PhaseRun {
        checkpoint: Checkpoint {
            model,
            phase: setup.phase,
            meta: CheckpointMeta {
                epoch: best_epoch,
                seed: setup.seed,
                weights,
                held_out: None,
            },
        },
        trace,
        best_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: CalibrationMode,
    /// Mean per-sample gradient norm of `(glob, l1, edge)`; `None` if disabled.
    pub grad_norms: [Option<f64>; 3],
    pub weights: LossWeights,
    pub batch_ids: Vec<String>,
}

impl CalibrationReport {
    /// `λ_k·ḡ_k` for every enabled term with non-zero weight.
    pub fn balance_products(&self) -> Vec<f64> {
        self.grad_norms
            .iter()
            .zip(self.weights.as_array())
            .filter_map(|(g, l)| g.filter(|_| l > 0.0).map(|g| g * l))
            .collect()
    }
}

/// Inverse-norm weights. Disabled terms and zero norms get weight zero.
pub fn weights_from_norms(norms: [Option<f64>; 3], mode: CalibrationMode) -> Result<LossWeights> {
    if norms.iter().flatten().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(invalid(format!("gradient norms must be finite and non-negative: {norms:?}")));
    }
    let inv = norms.map(|g| match g {
        Some(g) if g > 0.0 => 1.0 / g,
        _ => 0.0,
    });
    let lambda = match mode {
        CalibrationMode::Normalized => {
            let total: f64 = inv.iter().sum();
            if total == 0.0 {
                return Err(CoreError::Degenerate("all calibration gradient norms are zero".into()));
            }
            inv.map(|v| v / total)
        }
        CalibrationMode::PinGlobal => {
            let g0 = match norms[0] {
                Some(g) if g > 0.0 => g,
                _ => return Err(CoreError::Degenerate("global-term gradient norm is zero".into())),
            };
            inv.map(|v| v * g0)
        }
    };
    LossWeights::new(lambda[0], lambda[1], lambda[2])
}

/// Measures each enabled term's parameter-gradient norm per calibration
/// sample, averages over the batch and sets `λ_k ∝ 1/ḡ_k`.
pub fn calibrate_weights(source: &Checkpoint, batch: &PreparedSet, terms: Terms, mode: CalibrationMode) -> Result<CalibrationReport> {
    if source.phase != Phase::P1 {
        return Err(invalid("calibration requires a Phase-1 checkpoint"));
    }
    if batch.len() < MIN_CALIBRATION_BATCH {
        return Err(invalid(format!("calibration batch has {} samples, need {MIN_CALIBRATION_BATCH}", batch.len())));
    }
    let model = &source.model;
    let ids = model.params.ids();
    let enabled = terms.enabled();
    let mut sums = [0.0; 3];
    for i in 0..batch.len() {
        let (x, m) = batch.batch(&[i])?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let xv = g.constant(x);
        let f = model.forward(&mut g, &p, xv)?;
        let t = losses::phase2_terms(&mut g, xv, f.recon, m)?;
        for (k, node) in [t.glob, t.l1, t.edge].into_iter().enumerate() {
            if !enabled[k] {
                continue;
            }
            let loss = g.mean(node);
            let grads = g.backward(loss)?;
            sums[k] += grad_global_norm(&grads, &ids)?;
        }
    }
    let n = batch.len() as f64;
    let mut grad_norms = [None; 3];
    for k in 0..3 {
        if enabled[k] {
            grad_norms[k] = Some(sums[k] / n);
        }
    }
    let weights = weights_from_norms(grad_norms, mode)?;
    Ok(CalibrationReport {
        mode,
        grad_norms,
        weights,
        batch_ids: batch.samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Reconstructs every sample and computes its metric row.
pub fn evaluate(model: &Cae, set: &PreparedSet, split: &str, batch_size: usize) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk)?;
        let recon = model.reconstruct(&x)?;
        for (j, &i) in chunk.iter().enumerate() {
            let s = &set.samples[i];
            let r = GrayImage::from_plane(&recon, j)?;
            let [psnr, ms_ssim, roi_mae, roi_ms_ssim, roi_edge_mae] = image_metrics(&s.image, &r, &set.masks[i])?;
            out.push(MetricRecord {
                id: s.id.clone(),
                site: s.site.clone(),
                split: split.to_string(),
                psnr,
                ms_ssim,
                roi_mae,
                roi_ms_ssim,
                roi_edge_mae,
            });
        }
    }
    Ok(out)
}
