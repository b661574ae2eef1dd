//! Command drivers: prepare data, train, grid search, detect, evaluate,
//! and synthesize. The binary is a thin argument parser over these.
//!
//! Every command writes fixed-name artifacts into the output directory.
//! All artifacts are byte-deterministic for a fixed seed and inputs,
//! except `run_meta.json`, which carries wall-clock timings.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{load_labels, load_series, make_windows, split_train_validation, TimeSeries};
use crate::detector::{
    detect, fit_gaussian, residuals, write_scores_csv, DetectionConfig, ResidualGaussian,
};
use crate::error::{RaemepcError, Result};
use crate::evaluator::{evaluate, LabeledScores, MetricReport};
use crate::model::Model;
use crate::synth::{generate, write_series_csv, SynthConfig};
use crate::trainer::{
    grid_search, load_checkpoint, save_checkpoint, train, GridSpec, PreparedData, TrainLog,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GAUSSIAN_FILE: &str = "gaussian.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const GRID_RESULTS_CSV: &str = "grid_results.csv";
pub const GRID_RESULTS_JSON: &str = "grid_results.json";
pub const GRID_PROGRESS_CSV: &str = "grid_progress.csv";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RaemepcError + '_ {
    move |e| RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| RaemepcError::Config(format!("serialization failed: {e}")))?;
    write_string(path, &text)
}

/// Loads, standardizes, and windows the configured datasets.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let fmt = cfg.series_format();
    let train_raw = load_series(&cfg.data.train_path, fmt)?;
    let standardizer = crate::data::Standardizer::fit(&train_raw);
    let train_std = standardizer.apply(&train_raw)?;
    let spec = cfg.split_spec();
    let windows = make_windows(&train_std, &spec, true)?;
    let (train_windows, val_windows) = split_train_validation(windows, spec.validation_fraction)?;

    let test = match &cfg.data.test_path {
        Some(p) => {
            let raw = load_series(p, fmt)?;
            if raw.dim() != train_raw.dim() {
                return Err(RaemepcError::Shape(format!(
                    "test series has {} variables, train has {}",
                    raw.dim(),
                    train_raw.dim()
                )));
            }
            let labels = match (&cfg.data.test_labels_path, &raw.labels) {
                (Some(lp), _) => Some(load_labels(lp)?),
                (None, Some(l)) => Some(l.clone()),
                (None, None) => None,
            };
            if let Some(l) = &labels {
                if l.len() != raw.len() {
                    return Err(RaemepcError::Shape(format!(
                        "{} labels for {} test steps",
                        l.len(),
                        raw.len()
                    )));
                }
            }
            let std_test = standardizer.apply(&raw)?;
            labels.map(|l| (std_test, l))
        }
        None => None,
    };

    Ok(PreparedData {
        train_windows,
        val_windows,
        standardizer,
        window_len: cfg.data.window_len,
        stride: cfg.data.stride,
        input_dim: train_raw.dim(),
        test,
    })
}

#[derive(Serialize)]
struct RunMeta {
    command: String,
    total_seconds: f64,
    epochs_run: usize,
    best_epoch: Option<usize>,
    parameter_count: usize,
    per_epoch_seconds: Vec<f64>,
}

fn write_train_artifacts(
    out_dir: &Path,
    cfg: &RunConfig,
    model: &Model,
    data: &PreparedData,
    log: &TrainLog,
    command: &str,
    total_seconds: f64,
) -> Result<()> {
    let res = residuals(model, &data.val_windows)?;
    let gaussian = fit_gaussian(&res)?;
    save_checkpoint(
        &out_dir.join(CHECKPOINT_FILE),
        model,
        &data.standardizer,
        &cfg.loss,
        data.stride,
    )?;
    write_json(&out_dir.join(GAUSSIAN_FILE), &gaussian)?;
    write_string(&out_dir.join(TRAIN_LOG_FILE), &log.to_csv())?;
    write_json(
        &out_dir.join(RUN_META_FILE),
        &RunMeta {
            command: command.to_string(),
            total_seconds,
            epochs_run: log.epochs.len(),
            best_epoch: log.best_epoch,
            parameter_count: model.store.total_values(),
            per_epoch_seconds: log.epochs.iter().map(|e| e.seconds).collect(),
        },
    )?;
    Ok(())
}

/// Trains one model from the config and writes checkpoint, residual
/// Gaussian, training log, and metadata.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    write_string(&out_dir.join(EFFECTIVE_CONFIG_FILE), &cfg.effective_toml()?)?;

    let data = prepare(cfg)?;
    let mut model = Model::new(cfg.model_config(data.input_dim))?;
    let log = train(
        &mut model,
        &data.train_windows,
        &data.val_windows,
        &cfg.loss,
        &cfg.train_config(),
    )?;
    write_train_artifacts(
        &out_dir,
        cfg,
        &model,
        &data,
        &log,
        "train",
        started.elapsed().as_secs_f64(),
    )?;
    let last = log.epochs.last();
    println!(
        "trained {} epochs (best {}), val_total {}",
        log.epochs.len(),
        log.best_epoch.map_or("-".into(), |e| e.to_string()),
        last.map_or("-".into(), |e| e.val_total.to_string()),
    );
    Ok(())
}

/// Runs the hyperparameter sweep; per-point rows stream into a progress
/// CSV as they finish, and the final table is rewritten sorted.
pub fn cmd_grid(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let started = Instant::now();
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    write_string(&out_dir.join(EFFECTIVE_CONFIG_FILE), &cfg.effective_toml()?)?;

    let data = prepare(cfg)?;
    if cfg.data.test_path.is_some() && data.test.is_none() {
        eprintln!(
            "note: test set has no labels; grid rows will carry validation loss only"
        );
    }
    let grid = cfg.grid.clone().unwrap_or_else(GridSpec::default);
    let base_model = cfg.model_config(data.input_dim);
    let train_cfg = cfg.train_config();

    let progress_path = out_dir.join(GRID_PROGRESS_CSV);
    let progress = std::fs::File::create(&progress_path).map_err(io_err(&progress_path))?;
    let mut header = crate::trainer::GridRow::csv_header();
    header.push('\n');
    {
        let mut p = &progress;
        p.write_all(header.as_bytes()).map_err(io_err(&progress_path))?;
        p.flush().map_err(io_err(&progress_path))?;
    }
    let progress = Mutex::new(progress);
    let on_row = |row: &crate::trainer::GridRow| {
        let mut line = row.csv_row();
        line.push('\n');
        if let Ok(mut f) = progress.lock() {
            let _ = f.write_all(line.as_bytes());
            let _ = f.flush();
        }
        eprintln!(
            "grid point {} done (hidden={}, tau={}, beta={}, lambda_shape={}): val_total={:?}",
            row.point.index,
            row.point.hidden_dim,
            row.point.tau,
            row.point.beta,
            row.point.lambda_shape,
            row.val_total
        );
    };

    let outcome = grid_search(
        &data,
        &base_model,
        &cfg.loss,
        &train_cfg,
        &grid,
        jobs.max(1),
        &on_row,
    )?;

    let mut table = crate::trainer::GridRow::csv_header();
    table.push('\n');
    for row in &outcome.rows {
        table.push_str(&row.csv_row());
        table.push('\n');
    }
    write_string(&out_dir.join(GRID_RESULTS_CSV), &table)?;
    write_json(&out_dir.join(GRID_RESULTS_JSON), &outcome.rows)?;

    match &outcome.best {
        Some((row, model, log, scores)) => {
            write_train_artifacts(
                &out_dir,
                cfg,
                model,
                &data,
                log,
                "grid",
                started.elapsed().as_secs_f64(),
            )?;
            if let Some((_, labels)) = &data.test {
                write_scores_csv(&out_dir.join(SCORES_FILE), scores, Some(labels))?;
                if let Some(m) = &row.metrics {
                    write_json(&out_dir.join(REPORT_JSON_FILE), m)?;
                    write_string(
                        &out_dir.join(REPORT_CSV_FILE),
                        &format!("{}\n{}\n", MetricReport::csv_header(), m.csv_row()),
                    )?;
                }
            }
            println!(
                "grid complete: {} points, best index {} (hidden={}, tau={}, beta={}, lambda_shape={}), val_total {}",
                outcome.rows.len(),
                row.point.index,
                row.point.hidden_dim,
                row.point.tau,
                row.point.beta,
                row.point.lambda_shape,
                row.val_total.unwrap_or(f64::NAN),
            );
        }
        None => {
            return Err(RaemepcError::Numerical(
                "every grid point failed; see grid_results.csv".into(),
            ));
        }
    }
    Ok(())
}

pub struct DetectArgs {
    pub checkpoint: PathBuf,
    /// Defaults to `gaussian.json` next to the checkpoint.
    pub gaussian: Option<PathBuf>,
    pub test: PathBuf,
    pub labels: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub stride: Option<usize>,
    pub out_dir: PathBuf,
}

/// Scores a test series with a saved model and writes the scores CSV.
pub fn cmd_detect(args: &DetectArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let gaussian_path = args.gaussian.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(GAUSSIAN_FILE)
    });
    let text = std::fs::read_to_string(&gaussian_path).map_err(io_err(&gaussian_path))?;
    let gaussian: ResidualGaussian = serde_json::from_str(&text)
        .map_err(|e| RaemepcError::Integrity(format!("{}: {e}", gaussian_path.display())))?;

    let raw = load_series(&args.test, None)?;
    if raw.dim() != ck.model.config.input_dim {
        return Err(RaemepcError::Shape(format!(
            "test series has {} variables, checkpoint expects {}",
            raw.dim(),
            ck.model.config.input_dim
        )));
    }
    let labels = match (&args.labels, &raw.labels) {
        (Some(lp), _) => Some(load_labels(lp)?),
        (None, Some(l)) => Some(l.clone()),
        (None, None) => None,
    };
    let std_test = ck.standardizer.apply(&raw)?;
    let dcfg = DetectionConfig {
        threshold: args.threshold,
        stride: args.stride.unwrap_or(ck.stride),
    };
    let scores = detect(&ck.model, &gaussian, &std_test, &dcfg)?;
    write_scores_csv(
        &args.out_dir.join(SCORES_FILE),
        &scores,
        labels.as_deref(),
    )?;
    println!(
        "scored {} steps (stride {}, threshold {:?})",
        scores.len(),
        dcfg.stride,
        dcfg.threshold
    );
    Ok(())
}

/// Reads `score` and optional `true_label` columns from a scores CSV.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Option<Vec<bool>>)> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| RaemepcError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let score_col = headers.iter().position(|h| h == "score").ok_or_else(|| {
        RaemepcError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "missing score column".into(),
        }
    })?;
    let label_col = headers.iter().position(|h| h == "true_label");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2;
        let record = record.map_err(|e| RaemepcError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let parse = |col: usize| -> Result<f64> {
            record
                .get(col)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| RaemepcError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: "non-numeric field".into(),
                })
        };
        scores.push(parse(score_col)?);
        if let Some(col) = label_col {
            labels.push(parse(col)? != 0.0);
        }
    }
    Ok((scores, label_col.map(|_| labels)))
}

pub struct EvaluateArgs {
    pub scores: PathBuf,
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Computes the metric report for a scores CSV against ground truth.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport> {
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let (scores, embedded) = read_scores_csv(&args.scores)?;
    let labels = match (&args.labels, embedded) {
        (Some(lp), _) => load_labels(lp)?,
        (None, Some(l)) => l,
        (None, None) => {
            return Err(RaemepcError::Config(
                "no labels: pass a label file or a scores CSV with a true_label column".into(),
            ))
        }
    };
    let ls = LabeledScores::new(scores, labels)?;
    let report = evaluate(&ls)?;
    write_json(&args.out_dir.join(REPORT_JSON_FILE), &report)?;
    write_string(
        &args.out_dir.join(REPORT_CSV_FILE),
        &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()),
    )?;
    println!(
        "auroc {} auprc {} best_f1 {} at threshold {}",
        report.auroc, report.auprc, report.best_f1, report.best_threshold
    );
    Ok(report)
}

/// Generates the synthetic dataset and writes train/test CSVs.
pub fn cmd_synthesize(out_dir: &Path, synth: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let data = generate(synth)?;
    write_series_csv(&out_dir.join("train.csv"), &data.train)?;
    write_series_csv(&out_dir.join("test.csv"), &data.test)?;
    write_json(&out_dir.join("synth_meta.json"), synth)?;
    let anomalies = data
        .test
        .labels
        .as_ref()
        .map_or(0, |l| l.iter().filter(|x| **x).count());
    println!(
        "synthesized train {}x{} and test {}x{} ({} anomalous steps)",
        data.train.len(),
        data.train.dim(),
        data.test.len(),
        data.test.dim(),
        anomalies
    );
    Ok(())
}

/// One standardized test series plus labels, loadable outside a full
/// config (used by the acceptance suite and ad-hoc runs).
pub fn load_labeled_test(
    test_path: &Path,
    labels_path: Option<&Path>,
    standardizer: &crate::data::Standardizer,
) -> Result<(TimeSeries, Vec<bool>)> {
    let raw = load_series(test_path, None)?;
    let labels = match (labels_path, &raw.labels) {
        (Some(lp), _) => load_labels(lp)?,
        (None, Some(l)) => l.clone(),
        (None, None) => {
            return Err(RaemepcError::Config(format!(
                "{} has no labels and no label file was given",
                test_path.display()
            )))
        }
    };
    if labels.len() != raw.len() {
        return Err(RaemepcError::Shape(format!(
            "{} labels for {} steps",
            labels.len(),
            raw.len()
        )));
    }
    Ok((standardizer.apply(&raw)?, labels))
}
