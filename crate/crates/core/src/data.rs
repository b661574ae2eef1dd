//! Series ingestion, standardization, sliding windows, and resolution
//! downsampling.
//!
//! Two input formats are understood: whitespace-separated values (the UCR
//! discord files, one time step per line) and CSV with a header row. A CSV
//! column named `label` is read as per-step anomaly flags; plain files can
//! pair with a separate label file via [`load_labels`].

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{RaemepcError, Result};

/// A d-variate series of N time steps, with optional per-step labels.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    /// `[N, d]` value matrix.
    pub values: Tensor,
    pub variable_names: Vec<String>,
    /// Anomaly flags, test sets only.
    pub labels: Option<Vec<bool>>,
}

impl TimeSeries {
    pub fn new(values: Tensor, variable_names: Vec<String>, labels: Option<Vec<bool>>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(RaemepcError::Argument("series must be non-empty".into()));
        }
        if variable_names.len() != values.cols() {
            return Err(RaemepcError::Shape(format!(
                "{} variable names for {} columns",
                variable_names.len(),
                values.cols()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != values.rows() {
                return Err(RaemepcError::Shape(format!(
                    "{} labels for {} time steps",
                    l.len(),
                    values.rows()
                )));
            }
        }
        Ok(Self {
            values,
            variable_names,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesFormat {
    /// Whitespace-separated values, one time step per line, no header.
    Plain,
    /// CSV with a header row; optional integer `label` column.
    Csv,
}

impl SeriesFormat {
    /// Picks CSV for a `.csv` extension, plain otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => SeriesFormat::Csv,
            _ => SeriesFormat::Plain,
        }
    }
}

/// Loads a series; `format` defaults to extension-based detection.
pub fn load_series(path: &Path, format: Option<SeriesFormat>) -> Result<TimeSeries> {
    let format = format.unwrap_or_else(|| SeriesFormat::from_path(path));
    match format {
        SeriesFormat::Plain => load_plain(path),
        SeriesFormat::Csv => load_csv(path),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> RaemepcError {
    RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> RaemepcError {
    RaemepcError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_plain(path: &Path) -> Result<TimeSeries> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric value {tok:?}")))?;
            row.push(v);
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged row: {} values, expected {}", row.len(), c),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let d = cols.unwrap();
    let names = (0..d).map(|i| format!("v{i}")).collect();
    TimeSeries::new(Tensor::from_rows(&rows)?, names, None)
}

fn load_csv(path: &Path) -> Result<TimeSeries> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let label_col = headers.iter().position(|h| h == "label");
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_col)
        .map(|(_, h)| h.to_string())
        .collect();
    if names.is_empty() {
        return Err(parse_err(path, 1, "no value columns"));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2; // header is line 1
        let record = record.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("ragged row: {} fields, expected {}", record.len(), headers.len()),
            ));
        }
        let mut row = Vec::with_capacity(names.len());
        for (i, field) in record.iter().enumerate() {
            if Some(i) == label_col {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("non-numeric label {field:?}")))?;
                labels.push(v != 0.0);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("non-numeric value {field:?}")))?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let labels = label_col.map(|_| labels);
    TimeSeries::new(Tensor::from_rows(&rows)?, names, labels)
}

/// Loads one 0/1 label per line.
pub fn load_labels(path: &Path) -> Result<Vec<bool>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("non-numeric label {t:?}")))?;
        labels.push(v != 0.0);
    }
    Ok(labels)
}

/// Per-variable mean/std computed on the training split only.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(train: &TimeSeries) -> Self {
        let (n, d) = (train.len(), train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.values.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in train.values.row(i).iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, series: &TimeSeries) -> Result<TimeSeries> {
        Ok(TimeSeries {
            values: self.apply_matrix(&series.values)?,
            variable_names: series.variable_names.clone(),
            labels: series.labels.clone(),
        })
    }

    pub fn apply_matrix(&self, values: &Tensor) -> Result<Tensor> {
        self.map_matrix(values, |v, m, s| (v - m) / s)
    }

    /// Inverse transform, for reporting in original units.
    pub fn invert_matrix(&self, values: &Tensor) -> Result<Tensor> {
        self.map_matrix(values, |v, m, s| v * s + m)
    }

    fn map_matrix(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        if values.cols() != self.dim() {
            return Err(RaemepcError::Shape(format!(
                "series has {} variables, statistics have {}",
                values.cols(),
                self.dim()
            )));
        }
        let (n, d) = (values.rows(), values.cols());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for (j, v) in values.row(i).iter().enumerate() {
                out.push(f(*v, self.mean[j], self.std[j]));
            }
        }
        Tensor::matrix(n, d, out)
    }
}

/// Windowing parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub window_len: usize,
    pub stride: usize,
    pub validation_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(RaemepcError::Config("window_len must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.window_len {
            return Err(RaemepcError::Config(format!(
                "stride must be in [1, window_len]; got {} with window_len {}",
                self.stride, self.window_len
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(RaemepcError::Config(format!(
                "validation_fraction must be in (0, 1); got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// One training or inference unit: an input window plus, when it fits, the
/// window shifted `floor(T/2)` steps ahead as the prediction target.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `[T, d]`.
    pub input: Tensor,
    /// `[T, d]`, present iff the slice `[origin+T/2, origin+T/2+T)` fits.
    pub prediction_target: Option<Tensor>,
    pub origin: usize,
}

fn slice_rows(values: &Tensor, start: usize, len: usize) -> Tensor {
    let d = values.cols();
    let data = values.data()[start * d..(start + len) * d].to_vec();
    Tensor::matrix(len, d, data).unwrap()
}

/// Cuts sliding windows at origins `0, stride, 2*stride, ...`. A final
/// right-aligned window at origin `N - T` is appended when the stride
/// pattern does not land there, so every time step is covered. With
/// `with_lookahead`, windows whose prediction slice fits carry a target.
pub fn make_windows(
    series: &TimeSeries,
    spec: &SplitSpec,
    with_lookahead: bool,
) -> Result<Vec<WindowSample>> {
    spec.validate()?;
    let (n, t) = (series.len(), spec.window_len);
    if n < t {
        return Err(RaemepcError::Argument(format!(
            "series length {n} is shorter than window length {t}"
        )));
    }
    let lookahead = t / 2;
    let mut origins: Vec<usize> = (0..=n - t).step_by(spec.stride).collect();
    if *origins.last().unwrap() != n - t {
        origins.push(n - t);
    }
    let windows = origins
        .into_iter()
        .map(|origin| {
            let target = if with_lookahead && origin + lookahead + t <= n {
                Some(slice_rows(&series.values, origin + lookahead, t))
            } else {
                None
            };
            WindowSample {
                input: slice_rows(&series.values, origin, t),
                prediction_target: target,
                origin,
            }
        })
        .collect();
    Ok(windows)
}

/// Splits windows chronologically: the last `fraction` become validation.
pub fn split_train_validation(
    windows: Vec<WindowSample>,
    fraction: f64,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    let n = windows.len();
    if n < 2 {
        return Err(RaemepcError::InsufficientData(format!(
            "need at least 2 windows to split, got {n}"
        )));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut train = windows;
    let val = train.split_off(n - n_val);
    Ok((train, val))
}

/// Selects `target_len` rows of `x` spread evenly with endpoints pinned:
/// 1-based row `round(1 + j*(T-1)/(L-1))` for `j = 0..L-1`, round half up.
pub fn downsample(x: &Tensor, target_len: usize) -> Result<Tensor> {
    let t = x.rows();
    if target_len == 0 || target_len > t {
        return Err(RaemepcError::Argument(format!(
            "cannot downsample {t} rows to {target_len}"
        )));
    }
    if target_len == 1 {
        return Ok(slice_rows(x, 0, 1));
    }
    let d = x.cols();
    let mut out = Vec::with_capacity(target_len * d);
    for j in 0..target_len {
        let pos = 1.0 + (j as f64) * ((t - 1) as f64) / ((target_len - 1) as f64);
        let idx = pos.round() as usize - 1; // back to 0-based
        out.extend_from_slice(x.row(idx));
    }
    Tensor::matrix(target_len, d, out)
}
