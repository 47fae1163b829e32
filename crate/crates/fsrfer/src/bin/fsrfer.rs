//! Command-line entry point. All logic lives in the library; this binary
//! parses flags, resolves the configuration (profile defaults < config
//! file < dotted overrides such as `--fsr.sigma 2.0` < dedicated flags),
//! dispatches one subcommand, and maps errors to exit codes:
//! 0 success, 1 usage/configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use fsrfer::config::{extract_dotted_overrides, load_config, Profile, RunConfig};
use fsrfer::pipeline;
use fsrfer::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "fsrfer",
    version,
    about = "Feature-level super-resolution for facial expression recognition",
    after_help = "Any flag of the form --<section>.<key> <value> overrides a configuration\n\
                  key, e.g. --fsr.sigma 2.0 or --data.scales [2,4]."
)]
struct Cli {
    /// Sectioned TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Sizing profile: smoke (CI-sized) or paper (published values).
    #[arg(long, global = true, default_value = "smoke")]
    profile: String,

    /// Master seed applied to every pipeline stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset root (overrides data.root).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Root for timestamped run directories (overrides eval.out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic seven-class dataset under data.root.
    PrepareData {
        /// Training images per class (validation gets twice as many).
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Pre-train the recognition model on high-resolution images.
    TrainFer {
        /// Maximum training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the feature super-resolution stage against a frozen
    /// recognition checkpoint.
    TrainFsr {
        #[arg(long, value_name = "FILE")]
        fer_checkpoint: PathBuf,
        /// Comma-separated scale factors, each in 2..=8.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Difficulty-based per-sample loss re-weighting.
        #[arg(long, value_name = "on|off")]
        reweight: Option<String>,
        /// Re-weighting offset (must exceed 1).
        #[arg(long)]
        sigma: Option<f64>,
        /// Re-weighting exponent.
        #[arg(long)]
        r: Option<f64>,
        /// Gradient-penalty coefficient.
        #[arg(long)]
        k: Option<f64>,
        /// Gradient-penalty exponent.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate per-scale accuracy of the configured methods.
    Eval {
        #[arg(long, value_name = "FILE")]
        fer_checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        fsr_checkpoint: Option<PathBuf>,
        /// Comma-separated subset of hr,bicubic,restored-images,fsr-fer.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated scale factors, each in 2..=8.
        #[arg(long)]
        scales: Option<String>,
        /// Directory of externally restored images (x<scale>/<class>/).
        #[arg(long, value_name = "DIR")]
        restored_dir: Option<PathBuf>,
    },
    /// Re-render a previous evaluation, or compare how fast two training
    /// logs reach a target validation accuracy.
    Report {
        /// Evaluation run directory (or its report.csv) to re-render.
        #[arg(long, value_name = "PATH")]
        from: Option<PathBuf>,
        /// First training log (JSONL) for convergence comparison.
        #[arg(long, value_name = "FILE")]
        log_a: Option<PathBuf>,
        /// Second training log (JSONL) for convergence comparison.
        #[arg(long, value_name = "FILE")]
        log_b: Option<PathBuf>,
        /// Target smoothed validation accuracy (default: log A's final).
        #[arg(long)]
        target: Option<f64>,
    },
}

fn parse_scales(spec: &str) -> Result<Vec<u32>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad scale '{s}' (want an integer in 2..=8)")))
        })
        .collect()
}

fn parse_on_off(spec: &str) -> Result<bool> {
    match spec {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Config(format!(
            "expected 'on' or 'off', got '{other}'"
        ))),
    }
}

/// Fold the dedicated subcommand flags into the resolved configuration.
fn apply_flags(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(data) = &cli.data {
        cfg.data.root = data.clone();
    }
    if let Some(out) = &cli.out {
        cfg.eval.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_master_seed(seed);
    }
    match &cli.cmd {
        Cmd::PrepareData { n_per_class } => {
            if let Some(n) = n_per_class {
                cfg.data.n_per_class = *n;
            }
        }
        Cmd::TrainFer { epochs } => {
            if let Some(e) = epochs {
                cfg.fer.max_epochs = *e;
            }
        }
        Cmd::TrainFsr {
            scales,
            iters,
            batch,
            reweight,
            sigma,
            r,
            k,
            p,
            lr,
            ..
        } => {
            if let Some(s) = scales {
                cfg.data.scales = parse_scales(s)?;
            }
            if let Some(v) = iters {
                cfg.fsr.iters = *v;
            }
            if let Some(v) = batch {
                cfg.fsr.batch_size = *v;
            }
            if let Some(v) = reweight {
                cfg.fsr.reweight = parse_on_off(v)?;
            }
            if let Some(v) = sigma {
                cfg.fsr.sigma = *v;
            }
            if let Some(v) = r {
                cfg.fsr.r = *v;
            }
            if let Some(v) = k {
                cfg.fsr.k = *v;
            }
            if let Some(v) = p {
                cfg.fsr.p = *v;
            }
            if let Some(v) = lr {
                cfg.fsr.lr = *v;
            }
        }
        Cmd::Eval {
            methods,
            scales,
            restored_dir,
            ..
        } => {
            if let Some(m) = methods {
                cfg.eval.methods = m.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(s) = scales {
                cfg.data.scales = parse_scales(s)?;
            }
            if let Some(d) = restored_dir {
                cfg.eval.restored_dir = Some(d.clone());
            }
        }
        Cmd::Report { .. } => {}
    }
    cfg.validate()
}

fn dispatch(cfg: &RunConfig, cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::PrepareData { .. } => {
            let out = pipeline::run_prepare_data(cfg)?;
            println!(
                "prepared {} training and {} validation images over {} classes under {}",
                out.train_count,
                out.val_count,
                out.classes.len(),
                out.root.display()
            );
        }
        Cmd::TrainFer { .. } => {
            let out = pipeline::run_train_fer(cfg)?;
            println!(
                "trained recognition model for {} epochs; best validation accuracy {:.3}",
                out.history.len(),
                out.best_val_accuracy
            );
            println!("checkpoint: {}", out.checkpoint.display());
            println!("artifacts: {}", out.run_dir.display());
        }
        Cmd::TrainFsr { fer_checkpoint, .. } => {
            let out = pipeline::run_train_fsr(cfg, fer_checkpoint)?;
            match out.final_mean_accuracy {
                Some(acc) => println!(
                    "trained super-resolution stage; final mean validation accuracy {acc:.3}"
                ),
                None => println!("trained super-resolution stage"),
            }
            println!("checkpoint: {}", out.checkpoint.display());
            println!("training log: {}", out.log_path.display());
            println!("artifacts: {}", out.run_dir.display());
        }
        Cmd::Eval {
            fer_checkpoint,
            fsr_checkpoint,
            ..
        } => {
            let out = pipeline::run_eval(cfg, fer_checkpoint, fsr_checkpoint.as_deref())?;
            print!("{}", out.report.render_table());
            for w in &out.report.warnings {
                eprintln!("warning: {w}");
            }
            println!("artifacts: {}", out.run_dir.display());
        }
        Cmd::Report {
            from,
            log_a,
            log_b,
            target,
        } => {
            let out = match (from, log_a, log_b) {
                (Some(path), None, None) => pipeline::run_report_from_eval(cfg, path)?,
                (None, Some(a), Some(b)) => {
                    pipeline::run_convergence_report(cfg, a, b, *target)?
                }
                _ => {
                    return Err(Error::Config(
                        "report needs either --from <eval run> or both --log-a and --log-b".into(),
                    ))
                }
            };
            print!("{}", out.rendered);
            println!("artifacts: {}", out.run_dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::MissingPrerequisite { .. } => 1,
        _ => 2,
    }
}

fn run() -> std::result::Result<(), (String, u8)> {
    let argv: Vec<String> = std::env::args().collect();
    let (overrides, rest) = extract_dotted_overrides(&argv[1..])
        .map_err(|e| (e.to_string(), exit_code(&e)))?;
    let mut args = vec![argv.first().cloned().unwrap_or_else(|| "fsrfer".into())];
    args.extend(rest);

    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err((e.to_string(), 1)),
    };

    let profile: Profile = cli
        .profile
        .parse()
        .map_err(|e: Error| (e.to_string(), 1))?;
    let mut cfg = load_config(profile, cli.config.as_deref(), &overrides)
        .map_err(|e| (e.to_string(), exit_code(&e)))?;
    apply_flags(&mut cfg, &cli).map_err(|e| (e.to_string(), exit_code(&e)))?;

    println!("resolved configuration:");
    for line in cfg.to_toml().lines() {
        println!("  {line}");
    }

    dispatch(&cfg, &cli.cmd).map_err(|e| (e.to_string(), exit_code(&e)))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
