//! `roicae`: data generation, training, calibration, ablation, probes and
//! reports for the ROI-aware autoencoder.
//!
//! Every subcommand prints a one-line JSON summary on success. Failures print
//! `{"error": <kind>, "message": <text>}` on stderr and exit with status 1
//! (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use roicae_core::harness::{
    checkpoint_context, collect_runs, read_json, write_json, emit_report, run_ablation, run_protocol, seed_dir_name, AblationSpec, ProtocolSpec, SeedContext,
};
use roicae_core::model::Checkpoint;
use roicae_core::synth::{generate_dataset, DatasetSpec, Manifest, SiteProfile};
use roicae_core::train::{CalibrationReport, TrainConfig};
use roicae_core::{Canvas, CoreError};
use serde_json::json;

#[derive(Parser)]
#[command(name = "roicae", version, about = "ROI-aware convolutional autoencoder experiments")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    P1,
    P2,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site dataset.
    GenData {
        #[arg(long, default_value_t = 3)]
        sites: usize,
        #[arg(long, default_value_t = 120)]
        per_site: usize,
        #[arg(long, default_value = "160x112")]
        canvas: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase for one seed of a leave-one-site-out split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: String,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Defaults to the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Phase-1 checkpoint to continue from (required for p2).
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Seed directory; defaults to `runs/hold-out-<site>/seed-<n>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute Phase-2 loss weights from a Phase-1 checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the report; defaults to `calibration.json` beside
        /// the checkpoint's phase directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-horizon loss-term ablation from a shared Phase-1 checkpoint.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: String,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these seeds (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Run the latent probe battery on a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hold_out: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the seed directory that holds the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a runs directory into tables, deltas and plots.
    Report {
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full protocol (every seed: P1, calibration, P2, probes).
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// One of hold-out-a, hold-out-b, hold-out-c, dev.
        #[arg(long, default_value = "dev")]
        preset: String,
        /// Overrides the preset's schedule, seeds and terms.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        hold_out: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> roicae_core::Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

/// `<seed dir>/<phase>/checkpoint.json` → `<seed dir>`.
fn seed_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> roicae_core::Result<serde_json::Value> {
    match cli.command {
        Command::GenData {
            sites,
            per_site,
            canvas,
            seed,
            out,
        } => {
            let spec = DatasetSpec {
                profiles: SiteProfile::defaults_for(sites),
                n_per_site: per_site,
                canvas: Canvas::parse(&canvas)?,
                seed,
            };
            let m = generate_dataset(&spec, &out)?;
            Ok(json!({"manifest": out.join(roicae_core::synth::MANIFEST_FILE), "samples": m.entries.len(), "sites": m.sites()}))
        }
        Command::Train {
            manifest,
            hold_out,
            phase,
            seed,
            config,
            from_checkpoint,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let manifest = Manifest::load(&manifest)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let ctx = SeedContext::new(&manifest, &config, &hold_out, seed)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("hold-out-{}", hold_out.to_lowercase())).join(seed_dir_name(seed)));
            ctx.write_split(&dir)?;
            match phase {
                PhaseArg::P1 => {
                    if from_checkpoint.is_some() {
                        log::warn!("--from-checkpoint ignored for p1, which starts from a fresh initialisation");
                    }
                    let ck = ctx.train_p1(&dir.join("p1"))?;
                    Ok(json!({"phase": "P1", "seed": seed, "best_epoch": ck.meta.epoch, "dir": dir}))
                }
                PhaseArg::P2 => {
                    let from = from_checkpoint.ok_or_else(|| CoreError::Invalid("p2 needs --from-checkpoint".into()))?;
                    let p1 = Checkpoint::load(&from)?;
                    let cal_path = dir.join("calibration.json");
                    let cal: CalibrationReport = if cal_path.exists() {
                        read_json(&cal_path)?
                    } else {
                        let cal = ctx.calibrate(&p1, config.terms)?;
                        write_json(&cal_path, &cal)?;
                        cal
                    };
                    let ck = ctx.train_p2(&p1, cal.weights, &dir.join("p2"))?;
                    Ok(json!({"phase": "P2", "seed": seed, "best_epoch": ck.meta.epoch, "weights": cal.weights, "dir": dir}))
                }
            }
        }
        Command::Calibrate {
            checkpoint,
            manifest,
            hold_out,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let manifest = Manifest::load(&manifest)?;
            let (ck, ctx) = checkpoint_context(&manifest, &config, &checkpoint, hold_out.as_deref())?;
            let cal = ctx.calibrate(&ck, config.terms)?;
            let path = out.unwrap_or_else(|| seed_dir_of(&checkpoint).join("calibration.json"));
            write_json(&path, &cal)?;
            Ok(json!({"calibration": path, "weights": cal.weights, "grad_norms": cal.grad_norms}))
        }
        Command::Ablate {
            manifest,
            hold_out,
            horizon,
            config,
            seed,
            from_checkpoint,
            runs_dir,
        } => {
            let mut config = load_config(config.as_deref())?;
            if !seed.is_empty() {
                config.seeds = seed;
            }
            let manifest = Manifest::load(&manifest)?;
            let mut spec = AblationSpec::new(&hold_out, config);
            if let Some(h) = horizon {
                spec.horizon = h;
            }
            let rows = run_ablation(&spec, &manifest, &runs_dir, from_checkpoint.as_deref())?;
            Ok(json!({"rows": rows.len(), "dir": runs_dir.join(format!("ablation-{hold_out}"))}))
        }
        Command::Probe {
            checkpoint,
            manifest,
            hold_out,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let manifest = Manifest::load(&manifest)?;
            let (ck, ctx) = checkpoint_context(&manifest, &config, &checkpoint, Some(&hold_out))?;
            let dir = out.unwrap_or_else(|| seed_dir_of(&checkpoint));
            let report = ctx.probe(&ck, &dir)?;
            Ok(json!({
                "seen_accuracy": report.seen_accuracy,
                "mahalanobis_auroc": report.ood.mahalanobis_auroc,
                "knn_auroc": report.ood.knn_auroc,
                "dir": dir,
            }))
        }
        Command::Report { runs_dir, out } => {
            let (protocols, ablations) = collect_runs(&runs_dir)?;
            let files = emit_report(&protocols, &ablations, &out)?;
            Ok(json!({"protocols": protocols.len(), "ablations": ablations.len(), "files": files.files}))
        }
        Command::Run {
            manifest,
            preset,
            config,
            hold_out,
            name,
            runs_dir,
        } => {
            let mut spec = ProtocolSpec::preset(&preset)?;
            if let Some(path) = config {
                spec.config = TrainConfig::load(&path)?;
            }
            if let Some(h) = hold_out {
                spec.held_out = h;
            }
            if let Some(n) = name {
                spec.name = n;
            }
            let manifest = Manifest::load(&manifest)?;
            let fragment = run_protocol(&spec, &manifest, &runs_dir)?;
            Ok(json!({"protocol": fragment.name, "held_out": fragment.held_out, "seeds": fragment.seeds.len()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
