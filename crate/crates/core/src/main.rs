//! Command-line entry point: data generation, training, evaluation,
//! level ablations, and curve export, driven by flags and/or a TOML
//! config with named presets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cqnp::checkpoint;
use cqnp::config::{preset, preset_names, resolve, RunConfig};
use cqnp::error::CqnpError;
use cqnp::eval::{
    ablate_ntau, evaluate, evaluate_batches, export_curves, tau_histogram, write_ablation_csv,
    LevelMode, UGrid,
};
use cqnp::model::ModelKind;
use cqnp::rng::{substream, Stream};
use cqnp::task::speedflow::{load_speed_flow, write_synthetic_speed_flow};
use cqnp::task::{freeze_test_set, make_batch, ProcessSpec, SplitMode, TaskBatch};
use cqnp::train::{train, DataSource};

#[derive(Parser)]
#[command(
    name = "cqnp",
    about = "Quantile-mixture neural processes: train, evaluate, ablate, export",
    long_about = None,
    after_help = preset_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn preset_help() -> String {
    format!(
        "presets (--preset, reference hyperparameters per experiment):\n  {}",
        preset_names().join("\n  ")
    )
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset such as cqnp/double_sine (see --help footer).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// preset < config file < flags.
    fn layered(&self, flags: RunConfig) -> Result<RunConfig, CqnpError> {
        let mut cfg = flags;
        if let Some(path) = &self.config {
            cfg = cfg.or_from(&RunConfig::load(path)?);
        }
        let preset_name = cfg.preset.clone().or_else(|| self.preset.clone());
        if let Some(name) = &preset_name {
            cfg = cfg.or_from(&preset(name)?);
        }
        if cfg.seed.is_none() {
            cfg.seed = self.seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frozen test set (NDJSON, one batch per line).
    Gen {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        process: Option<String>,
        #[arg(long, default_value_t = 1000)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic stand-in for the speed-flow CSV export.
    SynthSpeedflow {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        process: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        n_tau: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// Score only target points during training (default: all points).
        #[arg(long)]
        target_only_loss: bool,
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// speed_flow runs read their measurements from this CSV.
        #[arg(long)]
        speedflow_csv: Option<PathBuf>,
    },
    /// Score a checkpoint on a frozen test set (JSON report).
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        n_tau: Option<usize>,
        /// Use the fixed evenly-spaced level grid instead of fresh draws.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        speedflow_csv: Option<PathBuf>,
    },
    /// Evaluate trained quantile models over small fixed level grids.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        acqnp: PathBuf,
        #[arg(long)]
        cqnp: PathBuf,
        #[arg(long)]
        frozen: PathBuf,
        /// Comma-separated grid sizes.
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,9,11")]
        grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        process: Option<String>,
    },
    /// Export quantile curves (and optionally adapted-level samples) for one
    /// freshly drawn test task.
    Export {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        process: Option<String>,
        /// Number of evenly spread levels to export.
        #[arg(long, default_value_t = 10)]
        levels: usize,
        /// Level draws behind each predictive mean.
        #[arg(long)]
        n_tau: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write raw adapted levels per x (requires an acqnp model).
        #[arg(long)]
        tau_hist_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn sha256_hex(path: &PathBuf) -> Result<String, CqnpError> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn run(cli: Cli) -> Result<(), CqnpError> {
    match cli.command {
        Command::Gen {
            common,
            process,
            batches,
            batch_size,
            out,
        } => {
            let flags = RunConfig {
                process: process.map(|name| cqnp::config::ProcessSection { name: Some(name) }),
                paths: out.map(|o| cqnp::config::PathsSection {
                    out: Some(o),
                    ..Default::default()
                }),
                seed: common.seed,
                ..Default::default()
            };
            let cfg = common.layered(flags)?;
            let seed = cfg.seed.unwrap_or(0);
            let name = cfg
                .process
                .as_ref()
                .and_then(|p| p.name.clone())
                .ok_or_else(|| CqnpError::Config("gen needs --process".into()))?;
            let spec = ProcessSpec::from_name(&name)?;
            let out = cfg
                .paths
                .as_ref()
                .and_then(|p| p.out.clone())
                .ok_or_else(|| CqnpError::Config("gen needs --out".into()))?;
            freeze_test_set(&spec, batches, batch_size, seed, &out)?;
            println!(
                "wrote {} batches x {} tasks to {} (sha256 {})",
                batches,
                batch_size,
                out.display(),
                sha256_hex(&out)?
            );
            Ok(())
        }
        Command::SynthSpeedflow { out, seed } => {
            write_synthetic_speed_flow(&out, seed)?;
            println!("wrote {} (sha256 {})", out.display(), sha256_hex(&out)?);
            Ok(())
        }
        Command::Train {
            common,
            model,
            process,
            iterations,
            batch_size,
            lr,
            l2,
            n_tau,
            threads,
            target_only_loss,
            ckpt_out,
            log_out,
            speedflow_csv,
        } => {
            let flags = RunConfig {
                seed: common.seed,
                process: process.map(|name| cqnp::config::ProcessSection { name: Some(name) }),
                model: model.map(|kind| cqnp::config::ModelSection {
                    kind: Some(kind),
                    ..Default::default()
                }),
                train: Some(cqnp::config::TrainSection {
                    iterations,
                    batch_size,
                    lr,
                    l2,
                    n_tau,
                    threads,
                    target_only_loss: if target_only_loss { Some(true) } else { None },
                    ..Default::default()
                }),
                paths: Some(cqnp::config::PathsSection {
                    checkpoint: ckpt_out,
                    log: log_out,
                    speedflow_csv,
                    ..Default::default()
                }),
                ..Default::default()
            };
            let mut cfg = common.layered(flags)?;
            // A bare --model/--process pair without a preset still trains:
            // default architectures come from the matching preset row.
            if cfg.model.as_ref().and_then(|m| m.encoder.clone()).is_none() {
                let kind = cfg
                    .model
                    .as_ref()
                    .and_then(|m| m.kind.clone())
                    .ok_or_else(|| CqnpError::Config("train needs --model or --preset".into()))?;
                let proc_name = cfg
                    .process
                    .as_ref()
                    .and_then(|p| p.name.clone())
                    .ok_or_else(|| CqnpError::Config("train needs --process or --preset".into()))?;
                cfg = cfg.or_from(&preset(&format!("{kind}/{proc_name}"))?);
            }
            let r = resolve(&cfg)?;
            let mut train_cfg = r.train;
            train_cfg.ckpt_path = r.paths.checkpoint.clone();
            train_cfg.log_path = r.paths.log.clone();

            let data = match r.process {
                ProcessSpec::SpeedFlow => {
                    let csv = r.paths.speedflow_csv.clone().ok_or_else(|| {
                        CqnpError::Config("speed_flow training needs --speedflow-csv".into())
                    })?;
                    DataSource::SpeedFlow(Box::new(load_speed_flow(&csv, r.seed)?))
                }
                spec => DataSource::Process(spec),
            };
            let out = train(r.model, &data, &train_cfg)?;
            let loss = out.log.final_loss().unwrap_or(f64::NAN);
            match &r.paths.checkpoint {
                Some(p) => println!(
                    "trained {} iterations (final loss {loss:.4}); checkpoint {} (sha256 {})",
                    train_cfg.iterations,
                    p.display(),
                    sha256_hex(p)?
                ),
                None => println!(
                    "trained {} iterations (final loss {loss:.4}); no --ckpt-out given",
                    train_cfg.iterations
                ),
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint: ckpt_path,
            frozen,
            n_tau,
            grid,
            out,
            speedflow_csv,
        } => {
            let cfg = common.layered(RunConfig::default())?;
            let seed = cfg.seed.unwrap_or(0);
            let model = checkpoint::load(&ckpt_path)?;
            let n_tau = n_tau
                .or(cfg.eval.as_ref().and_then(|e| e.n_tau))
                .unwrap_or(100);
            let mode = if grid {
                LevelMode::Grid(UGrid::new(n_tau)?)
            } else {
                LevelMode::Random { seed }
            };
            let report = match (&frozen, &speedflow_csv) {
                (Some(f), None) => evaluate(&model, f, n_tau, &mode, "frozen")?,
                (None, Some(csv)) => {
                    let lanes = load_speed_flow(csv, seed)?;
                    let batch = TaskBatch::new(vec![lanes[0].eval_task(), lanes[1].eval_task()])?;
                    evaluate_batches(&model, &[batch], n_tau, &mode, "speed_flow")?
                }
                _ => {
                    return Err(CqnpError::Config(
                        "eval needs exactly one of --frozen or --speedflow-csv".into(),
                    ))
                }
            };
            let json = report.to_json()?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Ablate {
            common: _,
            acqnp,
            cqnp: cqnp_path,
            frozen,
            grid,
            out,
            process,
        } => {
            let a = checkpoint::load_as(&acqnp, ModelKind::Acqnp)?;
            let c = checkpoint::load_as(&cqnp_path, ModelKind::Cqnp)?;
            let rows = ablate_ntau(&a, &c, &frozen, &grid, process.as_deref().unwrap_or("frozen"))?;
            write_ablation_csv(&rows, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Export {
            common,
            checkpoint: ckpt_path,
            process,
            levels,
            n_tau,
            out,
            tau_hist_out,
        } => {
            let flags = RunConfig {
                seed: common.seed,
                process: process.map(|name| cqnp::config::ProcessSection { name: Some(name) }),
                ..Default::default()
            };
            let cfg = common.layered(flags)?;
            let seed = cfg.seed.unwrap_or(0);
            let name = cfg
                .process
                .as_ref()
                .and_then(|p| p.name.clone())
                .ok_or_else(|| CqnpError::Config("export needs --process".into()))?;
            let spec = ProcessSpec::from_name(&name)?;
            let model = checkpoint::load(&ckpt_path)?;
            let mut rng = substream(seed, Stream::Data, &[]);
            let batch = make_batch(&spec, 1, &mut rng, SplitMode::Test)?;
            let task = &batch.samples()[0];
            let level_list: Vec<f64> = (1..=levels)
                .map(|i| i as f64 / (levels as f64 + 1.0))
                .collect();
            let mean_draws = n_tau.unwrap_or(100);
            let mut level_rng = substream(seed, Stream::Eval, &[]);
            export_curves(&model, task, &level_list, mean_draws, &mut level_rng, &out)?;
            println!(
                "wrote curves for {} target points to {}",
                task.n_total() - task.n_context,
                out.display()
            );
            if let Some(hist_path) = tau_hist_out {
                let (cx, cy) = task.context();
                let (tx, _) = task.target();
                let mut hist_rng = substream(seed, Stream::Eval, &[1]);
                let taus = tau_histogram(&model, tx, cx, cy, mean_draws, &mut hist_rng)?;
                let mut w = String::from("x,tau\n");
                for (x, per_x) in tx.iter().zip(&taus) {
                    for t in per_x {
                        w.push_str(&format!("{x},{t}\n"));
                    }
                }
                std::fs::write(&hist_path, w)?;
                println!("wrote adapted-level samples to {}", hist_path.display());
            }
            Ok(())
        }
    }
}
