//! Subcommand orchestration: each stage of the pipeline (data preparation,
//! recognition pre-training, super-resolution training, evaluation,
//! reporting) as a library function that writes its artifacts under a
//! timestamped run directory containing the resolved configuration echo.
//!
//! Run directories are never written twice: each invocation creates a
//! fresh `<UTC timestamp>-<stage>` directory under `eval.out`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::backbone::{train_fer, FerEpochStats, FerModel};
use crate::config::{config_echo, RunConfig};
use crate::data::{load_dataset, make_pairs, synthetic};
use crate::eval::{build_report, plot_curves, EvalContext, EvalMethod, ScaleReport};
use crate::gan::{prepare_fsr_samples, train_fsr, FsrModel, ValPoint};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// run directories
// ---------------------------------------------------------------------------

/// `YYYYMMDD-HHMMSS` in UTC for a given clock reading.
pub fn utc_compact(t: SystemTime) -> String {
    let secs = t
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    let days = secs.div_euclid(86_400);
    let sod = secs.rem_euclid(86_400);
    // civil-from-days (proleptic Gregorian)
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!(
        "{y:04}{m:02}{d:02}-{:02}{:02}{:02}",
        sod / 3600,
        (sod % 3600) / 60,
        sod % 60
    )
}

/// Create a fresh `<timestamp>-<stage>` directory under `root`; an existing
/// directory is never reused (a numeric suffix disambiguates collisions).
pub fn create_run_dir(root: &Path, stage: &str) -> Result<PathBuf> {
    let base = format!("{}-{stage}", utc_compact(SystemTime::now()));
    let mut candidate = root.join(&base);
    let mut n = 1;
    while candidate.exists() {
        n += 1;
        candidate = root.join(format!("{base}-{n}"));
    }
    std::fs::create_dir_all(&candidate).map_err(|e| Error::io(&candidate, e))?;
    Ok(candidate)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the resolved configuration into an artifact directory.
pub fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            what: format!("{what} at {}", path.display()),
            hint: hint.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// prepare-data
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PrepareOutcome {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train_count: usize,
    pub val_count: usize,
}

/// Generate the synthetic dataset under `data.root`, record the class
/// directory order in `classes.txt`, and echo the resolved configuration.
pub fn run_prepare_data(cfg: &RunConfig) -> Result<PrepareOutcome> {
    let root = &cfg.data.root;
    if root.join("train").exists() || root.join("val").exists() {
        return Err(Error::Config(format!(
            "dataset already exists under {}; point data.root somewhere fresh or delete it",
            root.display()
        )));
    }
    synthetic::generate_dataset(root, cfg.data.n_per_class, cfg.data.seed)?;
    let mut classes: Vec<String> = std::fs::read_dir(root.join("train"))
        .map_err(|e| Error::io(root.join("train"), e))?
        .filter_map(|e| {
            let e = e.ok()?;
            e.file_type()
                .ok()?
                .is_dir()
                .then(|| e.file_name().to_string_lossy().into_owned())
        })
        .collect();
    classes.sort();
    let mut classes_txt = classes.join("\n");
    classes_txt.push('\n');
    write_text(&root.join("classes.txt"), &classes_txt)?;
    write_config_echo(root, cfg)?;
    let count = |split: &str| -> usize {
        classes
            .iter()
            .map(|c| {
                std::fs::read_dir(root.join(split).join(c))
                    .map(|d| d.count())
                    .unwrap_or(0)
            })
            .sum()
    };
    Ok(PrepareOutcome {
        root: root.clone(),
        train_count: count("train"),
        val_count: count("val"),
        classes,
    })
}

// ---------------------------------------------------------------------------
// train-fer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainFerOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<FerEpochStats>,
    pub best_val_accuracy: f64,
}

/// Pre-train the recognition model on high-resolution images; artifacts:
/// `fer.ckpt`, `history.csv`, `classes.txt`, `config.toml`.
pub fn run_train_fer(cfg: &RunConfig) -> Result<TrainFerOutcome> {
    let canonical = cfg.data.canonical_size;
    let train = load_dataset(&cfg.data.root, "train", canonical)?;
    let val = load_dataset(&cfg.data.root, "val", canonical)?;
    let run_dir = create_run_dir(&cfg.eval.out, "train-fer")?;
    write_config_echo(&run_dir, cfg)?;
    let mut classes_txt = train.class_names.join("\n");
    classes_txt.push('\n');
    write_text(&run_dir.join("classes.txt"), &classes_txt)?;

    let (model, history) = train_fer(
        cfg.fer_config(),
        &train.items,
        &val.items,
        &cfg.fer_train_config(),
    )?;
    let checkpoint = run_dir.join("fer.ckpt");
    model.save(&checkpoint)?;

    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for h in &history {
        csv.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_accuracy));
    }
    write_text(&run_dir.join("history.csv"), &csv)?;
    let best_val_accuracy = history.iter().map(|h| h.val_accuracy).fold(0.0, f64::max);
    Ok(TrainFerOutcome {
        run_dir,
        checkpoint,
        history,
        best_val_accuracy,
    })
}

// ---------------------------------------------------------------------------
// train-fsr
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainFsrOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub val_points: Vec<ValPoint>,
    pub final_mean_accuracy: Option<f64>,
}

/// Train the feature super-resolution stage against a frozen recognition
/// checkpoint; artifacts: `fsr.ckpt` (best by mean validation accuracy),
/// `train.jsonl`, `config.toml`.
pub fn run_train_fsr(cfg: &RunConfig, fer_checkpoint: &Path) -> Result<TrainFsrOutcome> {
    require_file(
        fer_checkpoint,
        "recognition checkpoint",
        "run train-fer first",
    )?;
    let fer = FerModel::load(fer_checkpoint)?;
    if !fer.frozen {
        return Err(Error::Config(format!(
            "checkpoint {} is not frozen; super-resolution training requires a finished recognition model",
            fer_checkpoint.display()
        )));
    }
    let canonical = cfg.data.canonical_size;
    if fer.cfg.input_size != canonical {
        return Err(Error::Config(format!(
            "checkpoint expects {}px inputs but data.canonical_size is {canonical}",
            fer.cfg.input_size
        )));
    }
    let train = load_dataset(&cfg.data.root, "train", canonical)?;
    let val = load_dataset(&cfg.data.root, "val", canonical)?;
    let train_pairs = make_pairs(&train.items, &cfg.data.scales)?;
    let val_pairs = make_pairs(&val.items, &cfg.data.scales)?;
    let train_samples = prepare_fsr_samples(&fer, &train_pairs)?;
    let val_samples = prepare_fsr_samples(&fer, &val_pairs)?;

    let run_dir = create_run_dir(&cfg.eval.out, "train-fsr")?;
    write_config_echo(&run_dir, cfg)?;
    let checkpoint = run_dir.join("fsr.ckpt");
    let log_path = run_dir.join("train.jsonl");
    let mut opts = cfg.fsr_train_opts();
    opts.log_path = Some(log_path.clone());
    opts.checkpoint_path = Some(checkpoint.clone());

    let (model, val_points) = train_fsr(&fer, cfg.gan_config(), &train_samples, &val_samples, &opts)?;
    if !checkpoint.is_file() {
        // no validation point ever improved (e.g. empty validation set):
        // persist the final model so downstream stages have something to load
        model.save(&checkpoint)?;
    }
    let final_mean_accuracy = val_points.last().map(|p| p.mean_accuracy);
    Ok(TrainFsrOutcome {
        run_dir,
        checkpoint,
        log_path,
        val_points,
        final_mean_accuracy,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub report: ScaleReport,
    pub csv_path: PathBuf,
    pub table_path: PathBuf,
}

/// Evaluate the configured methods on the validation split at every
/// configured scale; artifacts: `report.csv`, `report.txt`, `curves.svg`,
/// `curves.csv`, `config.toml`.
pub fn run_eval(
    cfg: &RunConfig,
    fer_checkpoint: &Path,
    fsr_checkpoint: Option<&Path>,
) -> Result<EvalOutcome> {
    require_file(
        fer_checkpoint,
        "recognition checkpoint",
        "run train-fer first",
    )?;
    let fer = FerModel::load(fer_checkpoint)?;
    let methods: Vec<EvalMethod> = cfg
        .eval
        .methods
        .iter()
        .map(|m| EvalMethod::parse(m))
        .collect::<Result<_>>()?;
    let fsr = if methods.contains(&EvalMethod::FsrFer) {
        let path = fsr_checkpoint.ok_or_else(|| Error::MissingPrerequisite {
            what: "a super-resolution checkpoint (eval.methods includes fsr-fer)".into(),
            hint: "run train-fsr first, pass --fsr-checkpoint, or drop fsr-fer from eval.methods"
                .into(),
        })?;
        require_file(path, "super-resolution checkpoint", "run train-fsr first")?;
        Some(FsrModel::load(path)?)
    } else {
        None
    };
    let val = load_dataset(&cfg.data.root, "val", cfg.data.canonical_size)?;
    let pairs = make_pairs(&val.items, &cfg.data.scales)?;
    let ctx = EvalContext {
        fer: &fer,
        fsr: fsr.as_ref(),
        restored_root: cfg.eval.restored_dir.as_deref(),
    };
    let mut report = build_report(&methods, &cfg.data.scales, &ctx, &pairs, cfg.data.seed)?;
    report.config_echo = config_echo(cfg);

    let run_dir = create_run_dir(&cfg.eval.out, "eval")?;
    write_config_echo(&run_dir, cfg)?;
    let csv_path = run_dir.join("report.csv");
    write_text(&csv_path, &report.to_csv())?;
    let table_path = run_dir.join("report.txt");
    let mut table = report.render_table();
    if !report.warnings.is_empty() {
        table.push('\n');
        for w in &report.warnings {
            table.push_str(&format!("warning: {w}\n"));
        }
    }
    write_text(&table_path, &table)?;
    plot_curves(&report, &run_dir.join("curves.svg"))?;
    Ok(EvalOutcome {
        run_dir,
        report,
        csv_path,
        table_path,
    })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Parse a `method,scale,accuracy,n` CSV back into a report (methods in
/// first-appearance order, scales sorted).
pub fn parse_report_csv(text: &str) -> Result<ScaleReport> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "method,scale,accuracy,n" {
        return Err(Error::Dataset(format!(
            "unexpected report header '{header}' (want 'method,scale,accuracy,n')"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Dataset(format!(
                "report row {} has {} fields, want 4",
                i + 2,
                parts.len()
            )));
        }
        let scale: u32 = parts[1]
            .parse()
            .map_err(|_| Error::Dataset(format!("bad scale '{}'", parts[1])))?;
        let acc: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Dataset(format!("bad accuracy '{}'", parts[2])))?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Dataset(format!(
                "accuracy {acc} outside [0,1] in report row {}",
                i + 2
            )));
        }
        let n: usize = parts[3]
            .parse()
            .map_err(|_| Error::Dataset(format!("bad sample count '{}'", parts[3])))?;
        rows.push((parts[0].to_string(), scale, acc, n));
    }
    if rows.is_empty() {
        return Err(Error::Dataset("report holds no rows".into()));
    }
    let mut scales: Vec<u32> = rows.iter().map(|r| r.1).collect();
    scales.sort_unstable();
    scales.dedup();
    let mut report = ScaleReport::new(&scales, 0);
    for (method, scale, acc, n) in rows {
        report.insert(&method, scale, acc, n);
    }
    Ok(report)
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub run_dir: PathBuf,
    pub rendered: String,
}

/// Re-render the table and curves from a previous eval run (a run directory
/// or a direct path to its CSV).
pub fn run_report_from_eval(cfg: &RunConfig, from: &Path) -> Result<ReportOutcome> {
    let csv_path = if from.is_dir() {
        from.join("report.csv")
    } else {
        from.to_path_buf()
    };
    require_file(&csv_path, "evaluation report CSV", "run eval first")?;
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let report = parse_report_csv(&text)?;
    let run_dir = create_run_dir(&cfg.eval.out, "report")?;
    write_config_echo(&run_dir, cfg)?;
    let rendered = report.render_table();
    write_text(&run_dir.join("report.txt"), &rendered)?;
    write_text(&run_dir.join("report.csv"), &report.to_csv())?;
    plot_curves(&report, &run_dir.join("curves.svg"))?;
    Ok(ReportOutcome { run_dir, rendered })
}

/// Compare how fast two training runs reach a target smoothed validation
/// accuracy (defaults to run A's final smoothed accuracy).
pub fn run_convergence_report(
    cfg: &RunConfig,
    log_a: &Path,
    log_b: &Path,
    target: Option<f64>,
) -> Result<ReportOutcome> {
    require_file(log_a, "training log A", "run train-fsr first")?;
    require_file(log_b, "training log B", "run train-fsr first")?;
    let series_a = crate::eval::read_val_series(log_a)?;
    let series_b = crate::eval::read_val_series(log_b)?;
    if series_a.is_empty() || series_b.is_empty() {
        return Err(Error::Dataset(
            "both training logs must contain validation records".into(),
        ));
    }
    let target = match target {
        Some(t) => t,
        None => crate::eval::final_smoothed_accuracy(&series_a).unwrap(),
    };
    let outcome = crate::eval::convergence_compare(&series_a, &series_b, target);
    let show = |v: Option<u64>| match v {
        Some(n) => n.to_string(),
        None => "not reached".into(),
    };
    let rendered = format!(
        "target smoothed validation accuracy: {target}\n\
         run A ({}): reached at iteration {}\n\
         run B ({}): reached at iteration {}\n\
         ratio A/B: {}\n",
        log_a.display(),
        show(outcome.iters_a),
        log_b.display(),
        show(outcome.iters_b),
        match outcome.ratio {
            Some(r) => format!("{r:.3}"),
            None => "undefined (a run never reached the target)".into(),
        }
    );
    let run_dir = create_run_dir(&cfg.eval.out, "report")?;
    write_config_echo(&run_dir, cfg)?;
    write_text(&run_dir.join("convergence.txt"), &rendered)?;
    Ok(ReportOutcome { run_dir, rendered })
}
