//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! C1–C4 and C8 are exact or finite-difference oracles and take seconds.
//! C9 drives the `roicae` binary twice and compares the output trees byte by
//! byte. C5–C7 train the desk-scale CAE on synthetic three-site data and take
//! roughly a quarter of an hour on one core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use roicae_core::harness::{emit_report, phase_means, run_protocol, ProtocolFragment, ProtocolSpec};
use roicae_core::losses::{self, mask_batch, LossWeights, RoiMask};
use roicae_core::metrics::{auroc, psnr, rank_stats};
use roicae_core::model::{Cae, CaeConfig, Checkpoint, CheckpointMeta, Phase};
use roicae_core::preprocess::{remap_roi, validate_roi, Canvas, LetterboxTransform, RoiBox, MIN_ROI_SIDE};
use roicae_core::probes::RidgeModel;
use roicae_core::synth::{generate_dataset, synthesize_sample, DatasetSpec, Manifest, SiteProfile};
use roicae_core::train::{calibrate_weights, weights_from_norms, CalibrationMode, EarlyStopState, PreparedSet, Terms, TrainConfig};
use roicae_numerics::{kernels, Graph, ParamId, Rng, Stream, Tensor, Var};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn elapsed(t: Instant) -> String {
    format!("{:.1}s", t.elapsed().as_secs_f64())
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

// ---------------------------------------------------------------- C1

const FD_STEP: f64 = 1e-5;
const INSTANCES: u64 = 20;

type OpFn<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

/// `sum(op(inputs) ⊙ r)` for a fixed random projection `r`.
fn projected(inputs: &[Tensor], r: &Tensor, op: OpFn, grads: bool) -> (f64, Option<Vec<Tensor>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(ParamId(i), t.clone())).collect();
    let y = op(&mut g, &vars);
    let rv = g.constant(r.clone().reshape(g.value(y).shape()).expect("projection length"));
    let p = g.mul(y, rv).expect("same shape");
    let s = g.sum(p);
    let value = g.value(s).item();
    let grads = grads.then(|| {
        let gr = g.backward(s).expect("backward");
        (0..inputs.len()).map(|i| gr.get(ParamId(i)).expect("gradient per input").clone()).collect()
    });
    (value, grads)
}

/// Worst element-wise relative error between the tape gradient and central
/// differences; only inputs listed in `wrt` are perturbed.
fn fd_error(inputs: &[Tensor], wrt: &[usize], rng: &mut Rng, op: OpFn, floor: f64) -> f64 {
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, &vars);
        g.value(y).len()
    };
    let r = random(rng, &[out_len], -1.0, 1.0);
    let (_, grads) = projected(inputs, &r, op, true);
    let grads = grads.expect("requested");
    let mut worst: f64 = 0.0;
    for &i in wrt {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (projected(&plus, &r, op, false).0 - projected(&minus, &r, op, false).0) / (2.0 * FD_STEP);
            let a = grads[i].data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        }
    }
    worst
}

struct OpCase {
    name: &'static str,
    make: Box<dyn Fn(&mut Rng) -> Vec<Tensor>>,
    op: Box<dyn Fn(&mut Graph, &[Var]) -> Var>,
}

fn op_case(name: &'static str, make: impl Fn(&mut Rng) -> Vec<Tensor> + 'static, op: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        make: Box::new(make),
        op: Box::new(op),
    }
}

fn op_cases() -> Vec<OpCase> {
    let taps: Rc<[f64]> = kernels::gaussian_taps(3, 1.0).into();
    let u = |shape: &'static [usize], lo: f64, hi: f64| move |r: &mut Rng| vec![random(r, shape, lo, hi)];
    let pair = |r: &mut Rng| vec![random(r, &[24], -1.0, 1.0), random(r, &[24], 0.5, 2.0)];
    vec![
        op_case(
            "conv2d",
            |r| vec![random(r, &[1, 2, 6, 6], -1.0, 1.0), random(r, &[2, 2, 4, 4], -1.0, 1.0), random(r, &[2], -1.0, 1.0)],
            |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap(),
        ),
        op_case(
            "conv_transpose2d",
            |r| vec![random(r, &[1, 2, 3, 3], -1.0, 1.0), random(r, &[2, 2, 4, 4], -1.0, 1.0), random(r, &[2], -1.0, 1.0)],
            |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap(),
        ),
        op_case(
            "linear",
            |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[5, 4], -1.0, 1.0), random(r, &[5], -1.0, 1.0)],
            |g, v| g.linear(v[0], v[1], v[2]).unwrap(),
        ),
        op_case("leaky_relu", u(&[24], -1.0, 1.0), |g, v| g.leaky_relu(v[0], 0.1).unwrap()),
        op_case("sigmoid", u(&[24], -4.0, 4.0), |g, v| g.sigmoid(v[0])),
        op_case("global_avg_pool", u(&[2, 2, 3, 4], -1.0, 1.0), |g, v| g.global_avg_pool(v[0]).unwrap()),
        op_case("avg_pool2", u(&[1, 2, 4, 6], -1.0, 1.0), |g, v| g.avg_pool2(v[0]).unwrap()),
        op_case("replicate_pad", u(&[1, 1, 4, 5], -1.0, 1.0), |g, v| g.replicate_pad(v[0], 1).unwrap()),
        op_case("max_spatial", u(&[2, 2, 3, 3], -1.0, 1.0), |g, v| g.max_spatial(v[0]).unwrap()),
        op_case("reshape", u(&[2, 6], -1.0, 1.0), |g, v| g.reshape(v[0], &[3, 4]).unwrap()),
        op_case("filter_valid", u(&[1, 2, 5, 6], -1.0, 1.0), move |g, v| g.filter_valid(v[0], taps.clone()).unwrap()),
        op_case(
            "div_broadcast",
            |r| vec![random(r, &[2, 2, 3, 3], -1.0, 1.0), random(r, &[2, 2], 0.5, 2.0)],
            |g, v| g.div_broadcast(v[0], v[1]).unwrap(),
        ),
        op_case("masked_mean", u(&[2, 1, 4, 4], -1.0, 1.0), |g, v| {
            let w = Tensor::from_fn(&[2, 1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
            g.masked_mean(v[0], Rc::new(w)).unwrap()
        }),
        op_case("add", pair, |g, v| g.add(v[0], v[1]).unwrap()),
        op_case("sub", pair, |g, v| g.sub(v[0], v[1]).unwrap()),
        op_case("mul", pair, |g, v| g.mul(v[0], v[1]).unwrap()),
        op_case("div", pair, |g, v| g.div(v[0], v[1]).unwrap()),
        op_case("add_scalar", u(&[24], -1.0, 1.0), |g, v| g.add_scalar(v[0], 0.7)),
        op_case("mul_scalar", u(&[24], -1.0, 1.0), |g, v| g.mul_scalar(v[0], -1.3)),
        op_case("sqrt", u(&[24], 0.2, 3.0), |g, v| g.sqrt(v[0])),
        op_case("square", u(&[24], -2.0, 2.0), |g, v| g.square(v[0])),
        op_case("abs", u(&[24], -1.0, 1.0), |g, v| g.abs(v[0])),
        op_case("clamp_min", u(&[24], -1.0, 1.0), |g, v| g.clamp_min(v[0], 0.05)),
        op_case("powf", u(&[24], 0.2, 2.0), |g, v| g.powf(v[0], 0.37)),
        op_case("sum", u(&[24], -1.0, 1.0), |g, v| g.sum(v[0])),
        op_case("mean", u(&[24], -1.0, 1.0), |g, v| g.mean(v[0])),
    ]
}

/// Smooth 32×32 target and a nearby reconstruction, both in (0, 1).
fn image_pair(rng: &mut Rng) -> (Tensor, Tensor) {
    let (fx, fy, ph) = (rng.uniform_range(0.1, 0.4), rng.uniform_range(0.1, 0.4), rng.uniform_range(0.0, 6.0));
    let x = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (r, c) = ((i / 32) as f64, (i % 32) as f64);
        0.5 + 0.3 * (fx * c + ph).sin() * (fy * r).cos()
    });
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = (*v + 0.08 * rng.normal()).clamp(0.02, 0.98);
    }
    (x, y)
}

fn c1_autodiff() -> Outcome {
    const OP_TOL: f64 = 1e-4;
    const LOSS_TOL: f64 = 1e-3;
    let t = Instant::now();
    let mut worst_op: (f64, &str) = (0.0, "");
    for case in op_cases() {
        for k in 0..INSTANCES {
            let mut rng = Rng::substream(101, Stream::Data, k);
            let inputs = (case.make)(&mut rng);
            let wrt: Vec<usize> = (0..inputs.len()).collect();
            let e = fd_error(&inputs, &wrt, &mut rng, &*case.op, 1e-6);
            ensure!(e <= OP_TOL, "{} instance {k}: relative error {e:.2e} > {OP_TOL:e}", case.name);
            if e > worst_op.0 {
                worst_op = (e, case.name);
            }
        }
    }
    let canvas = Canvas::new(32, 32).unwrap();
    let mut worst_loss: BTreeMap<&str, f64> = BTreeMap::new();
    for k in 0..INSTANCES {
        let mut rng = Rng::substream(202, Stream::Data, k);
        let (x, y) = image_pair(&mut rng);
        let x1 = rng.uniform_range(4.0, 14.0);
        let y1 = rng.uniform_range(4.0, 14.0);
        let roi = RoiBox::new(x1, y1, x1 + rng.uniform_range(8.0, 14.0), y1 + rng.uniform_range(6.0, 12.0)).unwrap();
        let mask = mask_batch([&RoiMask::from_box(&roi, canvas).unwrap()]).unwrap();
        let weights = LossWeights::new(0.5, 0.2, 0.3).unwrap();
        let losses: [(&str, Box<dyn Fn(&mut Graph, Var, Var) -> Var>); 4] = [
            ("ms_ssim", Box::new(|g, a, b| losses::ms_ssim(g, a, b).unwrap())),
            ("phase1", Box::new(|g, a, b| losses::phase1_loss(g, a, b).unwrap())),
            ("roi_edge", {
                let m = mask.clone();
                Box::new(move |g, a, b| losses::roi_edge_loss(g, a, b, m.clone()).unwrap())
            }),
            ("phase2", {
                let m = mask.clone();
                Box::new(move |g, a, b| losses::phase2_total(g, a, b, m.clone(), &weights).unwrap())
            }),
        ];
        for (name, f) in &losses {
            let op = |g: &mut Graph, v: &[Var]| f(g, v[0], v[1]);
            // gradients flow into the reconstruction only
            let e = fd_error(&[x.clone(), y.clone()], &[1], &mut rng, &op, 1e-7);
            ensure!(e <= LOSS_TOL, "{name} instance {k}: relative error {e:.2e} > {LOSS_TOL:e}");
            let w = worst_loss.entry(name).or_default();
            *w = w.max(e);
        }
    }
    let secs = t.elapsed();
    ensure!(secs < Duration::from_secs(120), "took {secs:?}, budget 2 min");
    let losses: Vec<String> = worst_loss.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!(
        "26 ops x {INSTANCES} worst {:.1e} ({}); losses at 32x32 worst {} [{}]",
        worst_op.0,
        worst_op.1,
        losses.join(", "),
        elapsed(t)
    ))
}

// ---------------------------------------------------------------- C2

fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn c2_metric_oracles() -> Outcome {
    let t = Instant::now();
    for k in 0..200 {
        let mut rng = Rng::substream(303, Stream::Data, k);
        let (np, nn) = (1 + rng.below(50), 1 + rng.below(50));
        // coarse grid on odd draws to force ties
        let draw = |rng: &mut Rng| if k % 2 == 1 { rng.below(6) as f64 } else { rng.normal() };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut rng) - 0.3).collect();
        let (a, b) = (auroc(&pos, &neg).map_err(|e| e.to_string())?, brute_auroc(&pos, &neg));
        ensure!(a == b, "AUROC draw {k}: rank-based {a} != pair count {b}");
    }

    let mut rng = Rng::substream(304, Stream::Data, 0);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| 0.7 * r[0] - 1.2 * r[3] + 0.1 * rng.normal() + 2.0).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let mut ridge_gap: f64 = 0.0;
    for alpha in [0.1, 1.0, 10.0] {
        let model = RidgeModel::fit(&refs, &y, alpha).map_err(|e| e.to_string())?;
        // plain gradient descent on ‖Xw − (y − ȳ)‖² + α‖w‖² in the model's standardised space
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| model.standardizer.apply(r)).collect();
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let mut w = [0.0; 5];
        let lr = 1.0 / (2.0 * (20.0 + alpha));
        for _ in 0..20_000 {
            let mut grad = [0.0; 5];
            for (xi, yi) in xs.iter().zip(&y) {
                let resid: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - (yi - ybar);
                for j in 0..5 {
                    grad[j] += 2.0 * resid * xi[j];
                }
            }
            for j in 0..5 {
                w[j] -= lr * (grad[j] + 2.0 * alpha * w[j]);
            }
        }
        for j in 0..5 {
            ridge_gap = ridge_gap.max((w[j] - model.weights[j]).abs());
        }
        ensure!((model.intercept - ybar).abs() < 1e-12, "ridge intercept {} != mean target {ybar}", model.intercept);
    }
    ensure!(ridge_gap <= 1e-6, "ridge closed form differs from iterative solution by {ridge_gap:.2e}");

    let one_to_five = [1.0, 2.0, 3.0, 4.0, 5.0];
    // hand-computed: (y, prediction, R², Spearman ρ)
    let cases: [([f64; 5], [f64; 5], f64, f64); 4] = [
        (one_to_five, [1.1, 1.9, 3.2, 3.8, 5.0], 0.99, 1.0),
        (one_to_five, [5.0, 4.0, 3.0, 2.0, 1.0], -3.0, -1.0),
        (one_to_five, [1.0, 1.0, 2.0, 3.0, 3.0], 0.3, 9.0 / 90f64.sqrt()),
        ([2.0, 4.0, 1.0, 5.0, 3.0], one_to_five, -0.4, 0.3),
    ];
    for (i, (yt, yp, r2, rho)) in cases.iter().enumerate() {
        let s = rank_stats(yt, yp).map_err(|e| e.to_string())?;
        ensure!((s.r2 - r2).abs() < 1e-12 && (s.spearman - rho).abs() < 1e-12, "rank case {i}: got {s:?}, want R2 {r2} rho {rho}");
    }

    let x: Vec<f64> = (0..400).map(|i| (i % 7) as f64 / 10.0).collect();
    let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    let p = psnr(&x, &shifted);
    ensure!((p - 20.0).abs() < 1e-9, "PSNR at MSE 0.01 = {p}");

    let mut worst_ms: f64 = 0.0;
    for (k, (h, w)) in [(32usize, 32usize), (112, 160)].into_iter().enumerate() {
        let mut rng = Rng::substream(305, Stream::Data, k as u64);
        let img = random(&mut rng, &[2, 1, h, w], 0.0, 1.0);
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let ms = losses::ms_ssim(&mut g, a, b).map_err(|e| e.to_string())?;
        for v in g.value(ms).data() {
            worst_ms = worst_ms.max((v - 1.0).abs());
        }
    }
    ensure!(worst_ms <= 1e-9, "MS-SSIM(x, x) off by {worst_ms:.2e}");
    Ok(format!(
        "AUROC exact on 200 draws; ridge vs GD {ridge_gap:.1e}; 4 rank cases; PSNR {p:.12}; |MS-SSIM(x,x)-1| {worst_ms:.1e} [{}]",
        elapsed(t)
    ))
}

// ---------------------------------------------------------------- C3

fn c3_letterbox() -> Outcome {
    let t = Instant::now();
    let canvases = [(160, 112), (128, 128), (96, 64), (64, 96), (32, 32)];
    let (mut worst, mut rejected) = (0.0f64, 0);
    for k in 0..500 {
        let mut rng = Rng::substream(404, Stream::Data, k);
        let (sw, sh) = (8 + rng.below(600), 8 + rng.below(600));
        let (cw, ch) = canvases[rng.below(canvases.len())];
        let canvas = Canvas::new(cw, ch).unwrap();
        let tr = LetterboxTransform::fit(sw, sh, canvas).map_err(|e| e.to_string())?;
        let x1 = rng.uniform_range(0.0, sw as f64 - 1.0);
        let y1 = rng.uniform_range(0.0, sh as f64 - 1.0);
        // mix of tiny and ordinary boxes so both sides of the 2 px rule occur
        let span = if k % 3 == 0 { 4.0 } else { sw.min(sh) as f64 / 2.0 };
        // source annotations have sides of at least one pixel
        let x2 = (x1 + rng.uniform_range(1.0, span)).min(sw as f64);
        let y2 = (y1 + rng.uniform_range(1.0, span)).min(sh as f64);
        let roi = RoiBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        let mapped = remap_roi(&roi, &tr);
        let (bx1, by1) = tr.to_source(mapped.x1, mapped.y1);
        let (bx2, by2) = tr.to_source(mapped.x2, mapped.y2);
        for (a, b) in [(bx1, x1), (by1, y1), (bx2, x2), (by2, y2)] {
            worst = worst.max((a - b).abs());
        }
        // independent form of the rule: scaled side lengths, clipped to the canvas
        let s = (cw as f64 / sw as f64).min(ch as f64 / sh as f64);
        let ox = (cw as f64 - s * sw as f64) / 2.0;
        let oy = (ch as f64 - s * sh as f64) / 2.0;
        let side = |lo: f64, hi: f64, o: f64, lim: f64| ((s * hi + o).min(lim) - (s * lo + o).max(0.0)).max(0.0);
        let keep = side(x1, x2, ox, cw as f64) >= MIN_ROI_SIDE && side(y1, y2, oy, ch as f64) >= MIN_ROI_SIDE;
        let got = validate_roi(&mapped, canvas);
        ensure!(got == keep, "triple {k}: validate_roi {got}, 2 px rule says {keep} (box {mapped:?})");
        rejected += usize::from(!keep);
    }
    ensure!(worst <= 0.51, "round-trip error {worst} px > 0.51");
    ensure!(rejected > 0 && rejected < 500, "degenerate filtering never exercised both outcomes ({rejected} rejected)");
    Ok(format!("500 triples, worst corner error {worst:.1e} px, {rejected} degenerate boxes filtered [{}]", elapsed(t)))
}

// ---------------------------------------------------------------- C4

/// Mean over samples of the parameter-gradient norm of each Phase-2 term,
/// recomputed directly on the tape.
fn direct_norms(model: &Cae, set: &PreparedSet) -> [f64; 3] {
    let mut sums = [0.0; 3];
    for i in 0..set.len() {
        let (x, m) = set.batch(&[i]).unwrap();
        for k in 0..3 {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let f = model.forward(&mut g, &p, xv).unwrap();
            let t = losses::phase2_terms(&mut g, xv, f.recon, m.clone()).unwrap();
            let node = [t.glob, t.l1, t.edge][k];
            let loss = g.mean(node);
            let grads = g.backward(loss).unwrap();
            sums[k] += grads.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        }
    }
    sums.map(|s| s / set.len() as f64)
}

fn c4_calibration() -> Outcome {
    let t = Instant::now();
    let hand = weights_from_norms([Some(2.0), Some(1.0), Some(1.0)], CalibrationMode::Normalized).map_err(|e| e.to_string())?;
    for (got, want) in hand.as_array().iter().zip([0.2, 0.4, 0.4]) {
        ensure!((got - want).abs() < 1e-12, "hand case gives {hand:?}");
    }
    let canvas = Canvas::new(64, 48).unwrap();
    let profiles = SiteProfile::defaults();
    let samples = (0..8)
        .map(|i| synthesize_sample(&profiles[i % 2], canvas, 11, i % 2, i))
        .collect::<roicae_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let set = PreparedSet::new(samples, canvas).map_err(|e| e.to_string())?;
    let model = Cae::new(CaeConfig { latent: 32, ..CaeConfig::scaled(canvas) }, 5).map_err(|e| e.to_string())?;
    let direct = direct_norms(&model, &set);
    let ck = Checkpoint {
        model,
        phase: Phase::P1,
        meta: CheckpointMeta {
            epoch: 0,
            seed: 5,
            weights: None,
            held_out: None,
        },
    };
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for mode in [CalibrationMode::Normalized, CalibrationMode::PinGlobal] {
        for terms in [Terms::ALL, Terms { l1: true, edge: false }, Terms { l1: false, edge: true }] {
            let rep = calibrate_weights(&ck, &set, terms, mode).map_err(|e| e.to_string())?;
            let lambda = rep.weights.as_array();
            let enabled = terms.enabled();
            let products: Vec<f64> = (0..3).filter(|&k| enabled[k]).map(|k| lambda[k] * direct[k]).collect();
            for (k, g) in rep.grad_norms.iter().enumerate() {
                match g {
                    Some(g) => worst = worst.max((g - direct[k]).abs()),
                    None => ensure!(!enabled[k] && lambda[k] == 0.0, "disabled term {k} has weight {}", lambda[k]),
                }
            }
            let spread = products.iter().fold(0.0f64, |m, p| m.max((p - products[0]).abs()));
            ensure!(spread <= 1e-9, "{mode:?} {}: products {products:?} spread {spread:.2e}", terms.label());
            worst = worst.max(spread);
            cases += 1;
        }
    }
    Ok(format!("hand case (0.2, 0.4, 0.4); {cases} term/mode cases balanced within {worst:.1e} [{}]", elapsed(t)))
}

// ---------------------------------------------------------------- C8

fn c8_early_stopping() -> Outcome {
    // (label, patience, min_delta, trace, expected stop epoch, expected best epoch)
    let p1 = (5usize, 2e-5);
    let p2 = (7usize, 5e-5);
    let decreasing = |n: usize, step: f64| (0..n).map(|i| 1.0 - step * i as f64).collect::<Vec<f64>>();
    let traces: Vec<(&str, (usize, f64), Vec<f64>, Option<usize>, usize)> = vec![
        ("flat P1", p1, vec![0.5; 12], Some(6), 1),
        ("flat P2", p2, vec![0.5; 12], Some(8), 1),
        ("steady descent", p1, decreasing(20, 1e-3), None, 20),
        // each step is below the threshold but two steps clear it against the stored best
        ("accumulating small steps P1", p1, decreasing(20, 1.5e-5), None, 19),
        ("sub-threshold wobble P2", p2, vec![1.0, 0.99996, 0.99997, 0.99996, 0.99998, 0.99996, 0.99997, 0.99996, 0.99999, 0.99996], Some(8), 1),
        ("above-threshold descent P2", p2, decreasing(15, 6e-5), None, 15),
        ("late recovery P1", p1, vec![1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8], Some(11), 6),
        ("noisy plateau P1", p1, vec![1.0, 0.99, 1.01, 0.995, 0.99001, 0.98997, 0.99, 1.0, 0.99, 0.99, 0.99, 0.99], Some(11), 6),
        ("spike then best P2", p2, vec![1.0, 2.0, 0.5, 0.6, 0.7, 0.50004, 0.5, 0.5, 0.49999, 0.5, 0.5, 0.5], Some(10), 3),
        ("improves at last chance P2", p2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], Some(15), 8),
    ];
    for (label, (patience, delta), trace, stop, best) in &traces {
        let mut s = EarlyStopState::default();
        let mut stopped_at = None;
        for (i, &v) in trace.iter().enumerate() {
            if s.update(v, *patience, *delta).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        ensure!(stopped_at == *stop && s.best_epoch == *best, "{label}: stop {stopped_at:?} best {} (want {stop:?}, {best})", s.best_epoch);
    }
    Ok(format!("{} scripted traces reproduce stop and best epochs", traces.len()))
}

// ---------------------------------------------------------------- C9

fn roicae(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_roicae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| format!("spawn roicae: {e}"))?;
    ensure!(out.status.success(), "roicae {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

const SMOKE_CONFIG: &str = r#"{
  "p1": {"lr": 1e-4, "max_epochs": 10, "patience": 5, "min_delta": 2e-5},
  "p2": {"lr": 1e-5, "max_epochs": 5, "patience": 7, "min_delta": 5e-5},
  "seeds": [1000]
}
"#;

fn smoke_pipeline(root: &Path) -> Result<(), String> {
    std::fs::write(root.join("config.json"), SMOKE_CONFIG).map_err(|e| e.to_string())?;
    let m = "data/manifest.jsonl";
    let seed_dir = "runs/smoke/seed-1000";
    let p1 = "runs/smoke/seed-1000/p1/checkpoint.json";
    roicae(root, &["gen-data", "--sites", "3", "--per-site", "60", "--seed", "7", "--out", "data"])?;
    roicae(root, &["train", "--manifest", m, "--hold-out", "C", "--phase", "p1", "--config", "config.json", "--out", seed_dir])?;
    roicae(root, &["calibrate", "--checkpoint", p1, "--manifest", m, "--config", "config.json"])?;
    roicae(
        root,
        &["train", "--manifest", m, "--hold-out", "C", "--phase", "p2", "--config", "config.json", "--from-checkpoint", p1, "--out", seed_dir],
    )?;
    roicae(
        root,
        &["probe", "--checkpoint", "runs/smoke/seed-1000/p2/checkpoint.json", "--manifest", m, "--hold-out", "C", "--config", "config.json"],
    )?;
    roicae(root, &["report", "--runs-dir", "runs", "--out", "report"])
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable tree") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c9_determinism() -> Outcome {
    let t = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    smoke_pipeline(a.path())?;
    smoke_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure!(ta.keys().eq(tb.keys()), "runs produced different file sets");
    for (path, bytes) in &ta {
        ensure!(tb[path] == *bytes, "{} differs between runs", path.display());
    }
    for needed in ["report/metrics_table.csv", "report/deltas.csv", "report/probes.json", "report/plots/smoke-pca.ppm"] {
        ensure!(ta.contains_key(Path::new(needed)), "{needed} missing");
    }
    let secs = t.elapsed();
    ensure!(secs < Duration::from_secs(600), "two smoke pipelines took {secs:?}, budget 10 min each");
    Ok(format!("{} files byte-identical across two runs [{}]", ta.len(), elapsed(t)))
}

// ---------------------------------------------------------------- C5–C7

/// Desk-scale schedule: learning rates, patience and thresholds as in the
/// full configuration, epoch caps of 60 and 30 to fit the time budget.
fn desk_config(seeds: Vec<u64>) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.p1.max_epochs = 60;
    c.p2.max_epochs = 30;
    c.seeds = seeds;
    c
}

struct Runs {
    far: ProtocolFragment,
    near: ProtocolFragment,
    far_time: Duration,
}

fn train_runs(root: &Path) -> Result<Runs, String> {
    let data = root.join("data");
    let spec = DatasetSpec {
        profiles: SiteProfile::defaults(),
        n_per_site: 120,
        canvas: Canvas::DESK,
        seed: 7,
    };
    generate_dataset(&spec, &data).map_err(|e| e.to_string())?;
    let manifest = Manifest::load(&data.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let runs = root.join("runs");
    let t = Instant::now();
    let far = ProtocolSpec {
        name: "far".into(),
        held_out: "C".into(),
        config: desk_config(vec![1000, 1001, 1002]),
    };
    let far = run_protocol(&far, &manifest, &runs).map_err(|e| e.to_string())?;
    let far_time = t.elapsed();
    eprintln!("  far-site protocol trained in {:.0}s", far_time.as_secs_f64());
    let near = ProtocolSpec {
        name: "near".into(),
        held_out: "B".into(),
        config: desk_config(vec![1000]),
    };
    let near = run_protocol(&near, &manifest, &runs).map_err(|e| e.to_string())?;
    emit_report(&[far.clone(), near.clone()], &[], &root.join("report")).map_err(|e| e.to_string())?;
    Ok(Runs { far, near, far_time })
}

fn c5_two_phase(r: &Runs) -> Outcome {
    const EDGE: usize = 4;
    const MAE: usize = 2;
    const MS_SSIM: usize = 1;
    let get = |phase, split| phase_means(&r.far, phase, split).ok_or_else(|| format!("no {phase} {split} metrics"));
    let (v1, v2) = (get(Phase::P1, "val")?, get(Phase::P2, "val")?);
    let (t1, t2) = (get(Phase::P1, "test")?, get(Phase::P2, "test")?);
    let rel = 100.0 * (v2[EDGE] - v1[EDGE]) / v1[EDGE];
    let summary = format!(
        "val Edge-MAE {:.4}->{:.4} ({rel:+.2}%), val ROI-MAE {:.4}->{:.4}, held-out Edge-MAE {:.4}->{:.4}, val MS-SSIM delta {:+.4} (held-out {:+.4}); target >=2% {}; {:.0}s",
        v1[EDGE],
        v2[EDGE],
        v1[MAE],
        v2[MAE],
        t1[EDGE],
        t2[EDGE],
        v2[MS_SSIM] - v1[MS_SSIM],
        t2[MS_SSIM] - t1[MS_SSIM],
        if rel <= -2.0 { "met" } else { "not met" },
        r.far_time.as_secs_f64()
    );
    ensure!(v2[EDGE] < v1[EDGE], "val Edge-MAE did not drop: {summary}");
    ensure!(v2[MAE] < v1[MAE], "val ROI-MAE did not drop: {summary}");
    ensure!(t2[EDGE] <= 1.01 * t1[EDGE], "held-out Edge-MAE worse by more than 1%: {summary}");
    ensure!((v2[MS_SSIM] - v1[MS_SSIM]).abs() <= 0.002, "MS-SSIM moved by more than 0.002: {summary}");
    ensure!(r.far_time <= Duration::from_secs(1800), "over the 30 min budget: {summary}");
    Ok(summary)
}

fn c6_ood(r: &Runs) -> Outcome {
    let mut far = Vec::new();
    for s in &r.far.seeds {
        let ood = &s.probes.as_ref().ok_or("far run has no probe output")?.report.ood;
        ensure!(
            ood.mahalanobis_auroc >= 0.95 && ood.knn_auroc >= 0.85,
            "far seed {}: Mahalanobis {:.4}, KNN {:.4}",
            s.seed,
            ood.mahalanobis_auroc,
            ood.knn_auroc
        );
        far.push(format!("{:.3}/{:.3}", ood.mahalanobis_auroc, ood.knn_auroc));
    }
    let mut near = Vec::new();
    for s in &r.near.seeds {
        let ood = &s.probes.as_ref().ok_or("near run has no probe output")?.report.ood;
        ensure!(
            ood.mahalanobis_auroc > 0.5 && ood.knn_auroc > 0.5,
            "near seed {}: Mahalanobis {:.4}, KNN {:.4}",
            s.seed,
            ood.mahalanobis_auroc,
            ood.knn_auroc
        );
        near.push(format!("{:.3}/{:.3}", ood.mahalanobis_auroc, ood.knn_auroc));
    }
    Ok(format!("Mahalanobis/KNN AUROC far [{}], near [{}]", far.join(", "), near.join(", ")))
}

fn c7_probes(r: &Runs) -> Outcome {
    let s = r.near.seeds.first().ok_or("near run has no seeds")?;
    let rep = &s.probes.as_ref().ok_or("near run has no probe output")?.report;
    ensure!(rep.seen_accuracy >= 0.9, "seen-site accuracy {:.3} on sites {:?}", rep.seen_accuracy, rep.seen_sites);
    for site in ["A", "B", "C"] {
        let c = rep.confidence.iter().find(|c| c.site == site).ok_or(format!("no confidence row for {site}"))?;
        ensure!(c.n > 0 && c.confidence.mean.is_finite() && c.entropy.mean.is_finite(), "confidence row for {site}: {c:?}");
        ensure!(c.seen == (site != rep.held_out), "site {site} seen flag {}", c.seen);
    }
    let qc = rep
        .qc
        .iter()
        .find(|q| q.site == rep.held_out && q.split == "test")
        .ok_or("no QC row for the held-out site")?;
    ensure!(qc.stats.spearman > 0.0, "QC Spearman on held-out {} is {:.3}", rep.held_out, qc.stats.spearman);
    Ok(format!(
        "seen accuracy {:.3} ({}), 3 confidence rows, QC rho on held-out {} = {:.3}",
        rep.seen_accuracy,
        rep.seen_sites.join("+"),
        rep.held_out,
        qc.stats.spearman
    ))
}

// ---------------------------------------------------------------- driver

fn guarded<F: FnOnce() -> Outcome>(f: F) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn report(id: &str, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
        Err(why) => println!("[FAIL] {id} {name}: {why}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report("C1", "autodiff vs finite differences", &guarded(c1_autodiff));
    ok &= report("C2", "metric oracles", &guarded(c2_metric_oracles));
    ok &= report("C3", "letterbox round-trip", &guarded(c3_letterbox));
    ok &= report("C4", "calibration balance", &guarded(c4_calibration));
    ok &= report("C8", "early stopping", &guarded(c8_early_stopping));
    ok &= report("C9", "end-to-end determinism", &guarded(c9_determinism));

    let root = tempfile::tempdir().expect("temp dir");
    let runs = catch_unwind(AssertUnwindSafe(|| train_runs(root.path()))).unwrap_or_else(|_| Err("training panicked".into()));
    match runs {
        Ok(r) => {
            ok &= report("C5", "two-phase direction", &guarded(|| c5_two_phase(&r)));
            ok &= report("C6", "OOD battery", &guarded(|| c6_ood(&r)));
            ok &= report("C7", "probe plumbing", &guarded(|| c7_probes(&r)));
        }
        Err(e) => {
            for (id, name) in [("C5", "two-phase direction"), ("C6", "OOD battery"), ("C7", "probe plumbing")] {
                ok &= report(id, name, &Err(format!("training failed: {e}")));
            }
        }
    }
    std::process::exit(if ok { 0 } else { 1 });
}
