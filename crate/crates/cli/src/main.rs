//! `cvep`: command-line front end for the decoding toolkit.

mod artifact;
mod commands;
mod workspace;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cvep_core::containers::RunConfig;
use cvep_core::pipeline::CALIBRATION_DURATIONS_S;
use cvep_core::Error as CoreError;

use artifact::{hash_json, CliError, Provenance, Writer};
use commands::Ctx;
use workspace::{run_pipeline, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "cvep", version, about = "Minimal-calibration cVEP decoding toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run parameters (JSON). `run` and `sweep` take a pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Allow replacing existing outputs with different content.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select maximally separated codes from a white-noise pool.
    Design {
        #[arg(long, default_value_t = 10_000)]
        pool_size: usize,
        #[arg(long, default_value_t = 40)]
        select: usize,
        #[arg(long, default_value_t = 180)]
        frames: usize,
        /// Optimise placement on an RxC grid, e.g. `5x8`.
        #[arg(long, value_parser = parse_grid)]
        layout: Option<(usize, usize)>,
        /// Emit sinusoidal frequency-phase codes instead of white noise.
        #[arg(long)]
        jfpm: bool,
        /// Extra calibration codes taken from the unselected pool.
        #[arg(long, default_value_t = 20)]
        calibration: usize,
        #[arg(long)]
        calibration_out: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate simulated epochs for a virtual population.
    Simulate {
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value_t = 4)]
        trials: usize,
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
        /// Source SNR on the strongest channel; omit for absolute noise gains.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        /// Comma-separated subject ids (default: all).
        #[arg(long, value_delimiter = ',')]
        subjects: Option<Vec<usize>>,
        /// Write one continuous recording of this class instead of epochs.
        #[arg(long)]
        continuous_class: Option<usize>,
        #[arg(long, default_value_t = 2.0)]
        onset: f64,
        #[arg(long, default_value_t = 6.0)]
        total: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Notch and/or downsample an epoch file.
    Preprocess {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        downsample: Option<f64>,
        #[arg(long)]
        notch: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit discriminant spatial filters on calibration epochs.
    FitSpatial {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit temporal response functions on spatially filtered calibration data.
    FitTrf {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Build cross-subject templates for a target.
    FitTransfer {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        target_id: Option<usize>,
        #[arg(long)]
        model: PathBuf,
        /// `id:calib.cvep:test.cvep`, repeatable.
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
        /// Codebook of the classes to build templates for.
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        duration: f64,
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Classify test epochs against a template bank.
    Decode {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with_all = ["trf", "codebook"])]
        bank: Option<PathBuf>,
        #[arg(long, requires = "codebook")]
        trf: Option<PathBuf>,
        #[arg(long, requires = "trf")]
        codebook: Option<PathBuf>,
        /// Template length for `--trf`; defaults to the trial length.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Accuracy, ITR and confusion matrix of a decode run.
    Eval {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and ITR against calibration duration.
    Sweep {
        /// Number of seeds, starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = CALIBRATION_DURATIONS_S.to_vec())]
        durations: Vec<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Scan template alignment in a continuous recording.
    OnsetScan {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Expected onset in seconds from the recording start.
        #[arg(long)]
        center: f64,
        #[arg(long, default_value = "-100,100", value_parser = parse_range, allow_hyphen_values = true)]
        range_ms: (f64, f64),
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the full pipeline described by a config file.
    Run {
        /// Pipeline config; same as `--config`.
        path: Option<PathBuf>,
        /// Overrides the workspace in the config.
        #[arg(long)]
        workspace: Option<PathBuf>,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or("expected RxC")?;
    Ok((r.parse().map_err(|_| "bad rows")?, c.parse().map_err(|_| "bad columns")?))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((a.trim().parse().map_err(|_| "bad lower bound")?, b.trim().parse().map_err(|_| "bad upper bound")?))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Design { .. } => "design",
        Command::Simulate { .. } => "simulate",
        Command::Preprocess { .. } => "preprocess",
        Command::FitSpatial { .. } => "fit-spatial",
        Command::FitTrf { .. } => "fit-trf",
        Command::FitTransfer { .. } => "fit-transfer",
        Command::Decode { .. } => "decode",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::OnsetScan { .. } => "onset-scan",
        Command::Run { .. } => "run",
    }
}

fn load_pipeline(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.protocol.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().context("configuring thread pool")?;
    }
    let g = &cli.global;
    let name = command_name(&cli.command);
    if let Command::Run { path, workspace } = &cli.command {
        let cfg_path = path.as_deref().or(g.config.as_deref());
        let mut cfg = load_pipeline(cfg_path, g.seed)?;
        if let Some(w) = workspace {
            cfg.workspace = w.clone();
        }
        let report = run_pipeline(&cfg, g.force)?;
        let m = &report.metrics;
        println!("linear: accuracy {:.4}, itr {:.2} bits/min", m.linear.accuracy, m.linear.itr_bpm);
        if let Some(t) = &m.transfer {
            println!("transfer: accuracy {:.4}, itr {:.2} bits/min", t.accuracy, t.itr_bpm);
        }
        println!("report: {}", cfg.workspace.join("report.json").display());
        return Ok(());
    }
    if let Command::Sweep { seeds, durations, out } = &cli.command {
        let cfg = load_pipeline(g.config.as_deref(), g.seed)?;
        let ctx = Ctx {
            run: cfg.protocol.run.clone(),
            writer: Writer {
                provenance: Provenance {
                    command: name.into(),
                    config_hash: hash_json(&cfg.protocol)?,
                    seed: cfg.protocol.run.seed,
                },
                force: g.force,
            },
        };
        let first = cfg.protocol.run.seed;
        let seed_list: Vec<u64> = (0..*seeds).map(|i| first + i).collect();
        return commands::sweep(&ctx, &cfg, &seed_list, durations, out);
    }

    let mut run_cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        run_cfg.seed = s;
    }
    run_cfg.validate()?;
    let ctx = Ctx {
        writer: Writer {
            provenance: Provenance { command: name.into(), config_hash: hash_json(&run_cfg)?, seed: run_cfg.seed },
            force: g.force,
        },
        run: run_cfg,
    };
    match cli.command {
        Command::Design { pool_size, select, frames, layout, jfpm, calibration, calibration_out, out } => {
            commands::design(
                &ctx,
                &commands::DesignArgs { pool_size, select, frames, layout, jfpm, calibration, calibration_out, out },
            )
        }
        Command::Simulate {
            population,
            codebook,
            trials,
            duration,
            snr_db,
            subjects,
            continuous_class,
            onset,
            total,
            out,
        } => commands::simulate(
            &ctx,
            &commands::SimulateArgs {
                population,
                codebook,
                trials,
                duration_s: duration,
                snr_db,
                subjects,
                continuous: continuous_class.map(|class| commands::ContinuousArgs {
                    class,
                    onset_s: onset,
                    total_s: total,
                }),
                out_dir: out,
            },
        ),
        Command::Preprocess { input, downsample, notch, out } => {
            commands::preprocess(&ctx, &input, downsample, notch, &out)
        }
        Command::FitSpatial { input, out } => commands::fit_spatial(&ctx, &input, &out),
        Command::FitTrf { input, model, codebook, out } => commands::fit_trf(&ctx, &input, &model, &codebook, &out),
        Command::FitTransfer { target, target_id, model, sources, codebook, duration, weights_out, out } => {
            commands::fit_transfer(
                &ctx,
                &commands::TransferArgs {
                    target,
                    target_id,
                    model,
                    sources,
                    codebook,
                    duration_s: duration,
                    weights_out,
                    out,
                },
            )
        }
        Command::Decode { input, model, bank, trf, codebook, duration, out } => {
            let templates = match (bank, trf, codebook) {
                (Some(b), _, _) => commands::TemplateSource::Bank(b),
                (None, Some(trf), Some(codebook)) => {
                    commands::TemplateSource::Trf { trf, codebook, duration_s: duration }
                }
                _ => anyhow::bail!(CoreError::Argument("decode needs --bank or --trf with --codebook".into())),
            };
            commands::decode(&ctx, &input, &model, &templates, &out)
        }
        Command::Eval { input, out } => commands::eval(&ctx, &input, out.as_deref()),
        Command::OnsetScan { input, trial, model, bank, center, range_ms, out } => {
            commands::onset(&ctx, &commands::OnsetArgs { input, trial, model, bank, center_s: center, range_ms, out })
        }
        Command::Run { .. } | Command::Sweep { .. } => unreachable!("handled above"),
    }
}

/// 2 for missing inputs and bad arguments, 3 for invariant violations
/// and refused overwrites, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingInput { .. } => 2,
                CliError::Overwrite(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::MissingData(_) | CoreError::Argument(_) => 2,
                CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                CoreError::Io(_) => 1,
                _ => 3,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
