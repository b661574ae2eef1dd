//! Synthetic sine mixtures with injected spike and level-shift anomalies,
//! used by the end-to-end checks and the `synthesize` subcommand.
//!
//! The normal process per variable is a sum of two sines with
//! incommensurate periods plus Gaussian observation noise; the test split
//! continues the same process past the training range and then corrupts a
//! target fraction of steps, alternating short spikes with longer level
//! shifts at non-overlapping positions. Labels mark every corrupted step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::diffcore::Tensor;
use crate::error::{RaemepcError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_len: usize,
    pub test_len: usize,
    pub dims: usize,
    /// Fraction of test steps to corrupt.
    pub anomaly_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_len: 4096,
            test_len: 2048,
            dims: 2,
            anomaly_fraction: 0.05,
            noise_std: 0.05,
            seed: 42,
        }
    }
}

pub struct SynthData {
    pub train: TimeSeries,
    /// Carries labels for every step.
    pub test: TimeSeries,
}

const SLOW_PERIODS: [f64; 4] = [37.0, 53.0, 41.0, 61.0];
const FAST_PERIODS: [f64; 4] = [17.0, 29.0, 23.0, 31.0];

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.train_len < 4 || cfg.test_len < 4 || cfg.dims == 0 {
        return Err(RaemepcError::Argument(
            "synthetic series needs positive dims and lengths >= 4".into(),
        ));
    }
    if !(0.0..=0.5).contains(&cfg.anomaly_fraction) {
        return Err(RaemepcError::Argument(format!(
            "anomaly_fraction must be in [0, 0.5], got {}",
            cfg.anomaly_fraction
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let d = cfg.dims;

    // Per-variable phases and amplitudes.
    let phases: Vec<(f64, f64)> = (0..d)
        .map(|_| {
            (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let base = |t: usize, j: usize| -> f64 {
        let tf = t as f64;
        let slow = SLOW_PERIODS[j % SLOW_PERIODS.len()];
        let fast = FAST_PERIODS[j % FAST_PERIODS.len()];
        let amp = 1.0 - 0.15 * (j % 4) as f64;
        amp * (std::f64::consts::TAU * tf / slow + phases[j].0).sin()
            + 0.35 * (std::f64::consts::TAU * tf / fast + phases[j].1).sin()
    };

    let mut train = Vec::with_capacity(cfg.train_len * d);
    for t in 0..cfg.train_len {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            train.push(base(t, j) + cfg.noise_std * noise);
        }
    }

    // Test continues the process past the training range.
    let mut test = Vec::with_capacity(cfg.test_len * d);
    for t in 0..cfg.test_len {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            test.push(base(cfg.train_len + t, j) + cfg.noise_std * noise);
        }
    }

    // Inject anomalies at non-overlapping positions until the corrupted
    // step count reaches the target. Alternate spikes and level shifts.
    let mut labels = vec![false; cfg.test_len];
    let target = (cfg.anomaly_fraction * cfg.test_len as f64).round() as usize;
    let mut corrupted = 0usize;
    let mut spike_turn = true;
    let mut attempts = 0usize;
    while corrupted < target && attempts < 10_000 {
        attempts += 1;
        let remaining = target - corrupted;
        // Cap widths to the remaining budget so short series still land
        // near the requested fraction.
        let width = if spike_turn {
            rng.gen_range(1..=3usize)
        } else {
            rng.gen_range(30..=80usize)
        }
        .min(remaining);
        if width == 0 || width > cfg.test_len {
            continue;
        }
        let pos = rng.gen_range(0..=cfg.test_len - width);
        // Keep a small gap around existing anomalies.
        let lo = pos.saturating_sub(2);
        let hi = (pos + width + 2).min(cfg.test_len);
        if labels[lo..hi].iter().any(|l| *l) {
            continue;
        }
        let dim = rng.gen_range(0..d);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if spike_turn {
            let amp = sign * rng.gen_range(2.0..3.5);
            for t in pos..pos + width {
                test[t * d + dim] += amp;
            }
        } else {
            let offset = sign * rng.gen_range(0.8..1.6);
            for t in pos..pos + width {
                test[t * d + dim] += offset;
            }
        }
        for l in &mut labels[pos..pos + width] {
            *l = true;
        }
        corrupted += width;
        spike_turn = !spike_turn;
    }

    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    Ok(SynthData {
        train: TimeSeries::new(Tensor::matrix(cfg.train_len, d, train)?, names.clone(), None)?,
        test: TimeSeries::new(Tensor::matrix(cfg.test_len, d, test)?, names, Some(labels))?,
    })
}

/// Writes a series as CSV; labels become a final `label` column.
pub fn write_series_csv(path: &std::path::Path, series: &TimeSeries) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str(&series.variable_names.join(","));
    if series.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = series.values.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        if let Some(l) = &series.labels {
            out.push_str(if l[t] { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    let io = |e| RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)?;
    Ok(())
}
