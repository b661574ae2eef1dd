//! Batched training with Adam, early stopping on validation loss, grid
//! search over hyperparameters, and checkpoint persistence.
//!
//! One training step: forward every window of the batch on its own graph,
//! average the accumulated gradients over the batch, clip the global norm,
//! and apply one Adam update. Epoch batch order is shuffled with a
//! generator reseeded per epoch from the master seed, so runs with the
//! same seed are bit-identical. Early stopping keeps the parameter
//! snapshot with the lowest validation loss and restores it at the end.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Standardizer, TimeSeries, WindowSample};
use crate::detector::{detect, fit_gaussian, DetectionConfig, ScoreSeries};
use crate::diffcore::{AdamState, Graph, Tensor};
use crate::error::{RaemepcError, Result};
use crate::evaluator::{evaluate, LabeledScores, MetricReport};
use crate::losses::{LossWeights, SdtwWorkspace};
use crate::model::{Model, ModelConfig};

/// Training-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.001,
            patience: 20,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RaemepcError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(RaemepcError::Config("learning_rate must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(RaemepcError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Loss summary of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_shape: f64,
    pub train_pred: f64,
    pub val_total: f64,
    /// Wall-clock time; reported in the run metadata file, never in the
    /// deterministic CSV artifacts.
    pub seconds: f64,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose snapshot was restored (lowest validation loss).
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// Deterministic CSV (timing columns are excluded on purpose).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_total,train_recon,train_shape,train_pred,val_total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_total, e.train_recon, e.train_shape, e.train_pred, e.val_total
            ));
        }
        out
    }
}

fn mix_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    // SplitMix64-style mixing keeps the per-epoch generators decorrelated.
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct WindowLoss {
    total: f64,
    recon: f64,
    shape: f64,
    pred: f64,
}

fn window_loss_values(
    model: &Model,
    g: &mut Graph,
    window: &WindowSample,
    weights: &LossWeights,
    ws: &mut SdtwWorkspace,
    noise: Option<&mut ChaCha20Rng>,
    backward: bool,
) -> Result<WindowLoss> {
    let out = model.forward_graph(g, &window.input, noise, true)?;
    let loss = model.build_loss(
        g,
        &out,
        &window.input,
        window.prediction_target.as_ref(),
        weights,
        ws,
    )?;
    let values = WindowLoss {
        total: g.value(loss.total).item(),
        recon: g.value(loss.recon).item(),
        shape: loss.shape.map_or(0.0, |v| g.value(v).item()),
        pred: loss.pred.map_or(0.0, |v| g.value(v).item()),
    };
    if backward {
        g.backward(loss.total)?;
    }
    Ok(values)
}

/// Mean validation loss with noise disabled.
fn validation_loss(
    model: &Model,
    windows: &[WindowSample],
    weights: &LossWeights,
    ws: &mut SdtwWorkspace,
) -> Result<f64> {
    let mut total = 0.0;
    let mut g = Graph::new();
    for w in windows {
        g.clear();
        let values = window_loss_values(model, &mut g, w, weights, ws, None, false)?;
        total += values.total;
    }
    Ok(total / windows.len() as f64)
}

/// Trains in place. Returns the epoch history; the model ends up holding
/// the snapshot with the lowest validation loss.
pub fn train(
    model: &mut Model,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    weights.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(RaemepcError::InsufficientData(
            "training and validation window sets must be non-empty".into(),
        ));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }

    let mut adam = AdamState::new(cfg.learning_rate, &model.store);
    let mut ws = SdtwWorkspace::new();
    let mut graph = Graph::new();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>, usize)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0));
        let mut noise_rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 1));
        order.shuffle(&mut shuffle_rng);

        let mut sums = WindowLoss {
            total: 0.0,
            recon: 0.0,
            shape: 0.0,
            pred: 0.0,
        };
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grads();
            let mut batch_total = 0.0;
            for &wi in batch {
                let w = &train_windows[wi];
                graph.clear();
                let values = window_loss_values(
                    model,
                    &mut graph,
                    w,
                    weights,
                    &mut ws,
                    Some(&mut noise_rng),
                    true,
                )?;
                if !values.total.is_finite() {
                    return Err(RaemepcError::Numerical(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_idx}: \
                         total={} recon={} shape={} pred={}",
                        values.total, values.recon, values.shape, values.pred
                    )));
                }
                graph.accumulate_param_grads(&mut model.store)?;
                batch_total += values.total;
                sums.total += values.total;
                sums.recon += values.recon;
                sums.shape += values.shape;
                sums.pred += values.pred;
            }
            if !batch_total.is_finite() || model.store.any_grad_nonfinite() {
                return Err(RaemepcError::Numerical(format!(
                    "non-finite gradients at epoch {epoch}, batch {batch_idx}"
                )));
            }
            model.store.scale_grads(1.0 / batch.len() as f64);
            model.store.clip_global_grad_norm(cfg.clip_norm);
            adam.step(&mut model.store);
        }

        let n = train_windows.len() as f64;
        let val_total = validation_loss(model, val_windows, weights, &mut ws)?;
        log.epochs.push(EpochStats {
            epoch,
            train_total: sums.total / n,
            train_recon: sums.recon / n,
            train_shape: sums.shape / n,
            train_pred: sums.pred / n,
            val_total,
            seconds: started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_total < *b);
        if improved {
            best = Some((val_total, model.store.snapshot(), epoch));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, snapshot, epoch)) = best {
        model.store.restore(&snapshot);
        log.best_epoch = Some(epoch);
    }
    Ok(log)
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"RAEMEPC1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    standardizer: Standardizer,
    loss_weights: LossWeights,
    /// Training stride; detection defaults to it.
    stride: usize,
    params: Vec<ParamMeta>,
}

/// Everything needed to resume scoring: the model, its input statistics,
/// the loss weights it was trained with, and the training stride.
pub struct Checkpoint {
    pub model: Model,
    pub standardizer: Standardizer,
    pub loss_weights: LossWeights,
    pub stride: usize,
}

/// Binary layout: magic, u32 version, u64 header length, JSON header,
/// little-endian f64 parameter data in store order, SHA-256 of everything
/// preceding. Round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    standardizer: &Standardizer,
    loss_weights: &LossWeights,
    stride: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        standardizer: standardizer.clone(),
        loss_weights: *loss_weights,
        stride,
        params: model
            .store
            .iter()
            .map(|(name, t)| ParamMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| RaemepcError::Integrity(format!("header encoding failed: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, tensor) in model.store.iter() {
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let io = |e| RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e| RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut buf)
        .map_err(io)?;

    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 32 {
        return Err(RaemepcError::Integrity("checkpoint file truncated".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(RaemepcError::Integrity(
            "checkpoint checksum mismatch (file corrupted or truncated)".into(),
        ));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(RaemepcError::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(RaemepcError::Integrity(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if body.len() < 20 + header_len {
        return Err(RaemepcError::Integrity("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| RaemepcError::Integrity(format!("header decoding failed: {e}")))?;

    let mut model = Model::new(header.model.clone())?;
    // Validate the stored parameter list against the freshly built model.
    let metas = header.params;
    let built: Vec<(String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if metas.len() != built.len()
        || metas
            .iter()
            .zip(&built)
            .any(|(m, (n, s))| m.name != *n || m.shape != *s)
    {
        return Err(RaemepcError::Shape(
            "checkpoint parameter list does not match the declared model configuration".into(),
        ));
    }

    let mut offset = 20 + header_len;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let len = model.store.value(id).len();
        let need = len * 8;
        if body.len() < offset + need {
            return Err(RaemepcError::Integrity("checkpoint data truncated".into()));
        }
        let dst = model.store.value_mut(id).data_mut();
        for (k, v) in dst.iter_mut().enumerate() {
            let at = offset + k * 8;
            *v = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
        }
        offset += need;
    }
    if offset != body.len() {
        return Err(RaemepcError::Integrity(
            "checkpoint has trailing or missing parameter data".into(),
        ));
    }
    if header.standardizer.dim() != model.config.input_dim {
        return Err(RaemepcError::Shape(
            "standardizer dimension does not match model input".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        standardizer: header.standardizer,
        loss_weights: header.loss_weights,
        stride: header.stride,
    })
}

// ---------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------

/// Hyperparameter lists to sweep exhaustively.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "default_grid_hidden")]
    pub hidden_dim: Vec<usize>,
    #[serde(default = "default_grid_tau")]
    pub tau: Vec<usize>,
    #[serde(default = "default_grid_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "default_grid_lambda")]
    pub lambda_shape: Vec<f64>,
}

fn default_grid_hidden() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_grid_tau() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_grid_beta() -> Vec<f64> {
    vec![0.1, 0.3]
}
fn default_grid_lambda() -> Vec<f64> {
    vec![0.0001, 0.001]
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            hidden_dim: default_grid_hidden(),
            tau: default_grid_tau(),
            beta: default_grid_beta(),
            lambda_shape: default_grid_lambda(),
        }
    }
}

/// One grid coordinate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub hidden_dim: usize,
    pub tau: usize,
    pub beta: f64,
    pub lambda_shape: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim.is_empty()
            || self.tau.is_empty()
            || self.beta.is_empty()
            || self.lambda_shape.is_empty()
        {
            return Err(RaemepcError::Config("grid lists must be non-empty".into()));
        }
        Ok(())
    }

    /// Cartesian product in hidden x tau x beta x lambda order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &hidden_dim in &self.hidden_dim {
            for &tau in &self.tau {
                for &beta in &self.beta {
                    for &lambda_shape in &self.lambda_shape {
                        out.push(GridPoint {
                            index: out.len(),
                            hidden_dim,
                            tau,
                            beta,
                            lambda_shape,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Standardized, windowed inputs shared by every grid point.
pub struct PreparedData {
    pub train_windows: Vec<WindowSample>,
    pub val_windows: Vec<WindowSample>,
    pub standardizer: Standardizer,
    pub window_len: usize,
    pub stride: usize,
    pub input_dim: usize,
    /// Standardized test series with per-step labels, when available.
    pub test: Option<(TimeSeries, Vec<bool>)>,
}

/// Outcome of one grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub val_total: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
}

impl GridRow {
    pub fn csv_header() -> String {
        format!(
            "index,hidden_dim,tau,beta,lambda_shape,val_total,epochs_run,best_epoch,{},error",
            MetricReport::csv_header()
        )
    }

    pub fn csv_row(&self) -> String {
        let val = self.val_total.map_or(String::new(), |v| v.to_string());
        let best = self.best_epoch.map_or(String::new(), |v| v.to_string());
        let metrics = self.metrics.as_ref().map_or_else(
            || ",,,,,,,,,".to_string(),
            |m| m.csv_row(),
        );
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.point.index,
            self.point.hidden_dim,
            self.point.tau,
            self.point.beta,
            self.point.lambda_shape,
            val,
            self.epochs_run,
            best,
            metrics,
            self.error.clone().unwrap_or_default()
        )
    }
}

/// Result of a full sweep: all rows plus the winner by validation loss.
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best: Option<(GridRow, Model, TrainLog, ScoreSeries)>,
}

/// Trains one model per grid point and selects the lowest validation
/// loss. Failures are recorded per row and the sweep continues. `on_row`
/// fires as rows complete (possibly out of order when `jobs > 1`).
pub fn grid_search(
    data: &PreparedData,
    base_model: &ModelConfig,
    base_weights: &LossWeights,
    train_cfg: &TrainConfig,
    grid: &GridSpec,
    jobs: usize,
    on_row: &(dyn Fn(&GridRow) + Sync),
) -> Result<GridOutcome> {
    grid.validate()?;
    let points = grid.points();

    let run_point = |point: &GridPoint| -> GridRow {
        match run_grid_point(data, base_model, base_weights, train_cfg, point) {
            Ok((row, _, _, _)) => row,
            Err(e) => GridRow {
                point: *point,
                val_total: None,
                epochs_run: 0,
                best_epoch: None,
                metrics: None,
                error: Some(e.to_string()),
            },
        }
    };

    let mut rows: Vec<GridRow> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| RaemepcError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            points
                .par_iter()
                .map(|p| {
                    let row = run_point(p);
                    on_row(&row);
                    row
                })
                .collect()
        })
    } else {
        points
            .iter()
            .map(|p| {
                let row = run_point(p);
                on_row(&row);
                row
            })
            .collect()
    };
    rows.sort_by_key(|r| r.point.index);

    // Select by validation loss; ties go to the lowest index. The winner
    // is retrained (same seed, bit-identical) rather than kept in memory
    // across the whole sweep.
    let best_idx = rows
        .iter()
        .filter(|r| r.error.is_none() && r.val_total.is_some())
        .min_by(|a, b| {
            a.val_total
                .unwrap()
                .partial_cmp(&b.val_total.unwrap())
                .unwrap()
                .then(a.point.index.cmp(&b.point.index))
        })
        .map(|r| r.point.index);

    let best = match best_idx {
        Some(idx) => {
            let (row, model, log, scores) =
                run_grid_point(data, base_model, base_weights, train_cfg, &points[idx])?;
            Some((row, model, log, scores))
        }
        None => None,
    };
    Ok(GridOutcome { rows, best })
}

fn run_grid_point(
    data: &PreparedData,
    base_model: &ModelConfig,
    base_weights: &LossWeights,
    train_cfg: &TrainConfig,
    point: &GridPoint,
) -> Result<(GridRow, Model, TrainLog, ScoreSeries)> {
    let config = ModelConfig {
        input_dim: data.input_dim,
        window_len: data.window_len,
        hidden_dim: point.hidden_dim,
        tau: point.tau,
        beta: point.beta,
        ..base_model.clone()
    };
    let weights = LossWeights {
        lambda_shape: point.lambda_shape,
        ..*base_weights
    };
    let mut model = Model::new(config)?;
    let log = train(
        &mut model,
        &data.train_windows,
        &data.val_windows,
        &weights,
        train_cfg,
    )?;
    let val_total = log.epochs.iter().map(|e| e.val_total).fold(f64::INFINITY, f64::min);

    let res = crate::detector::residuals(&model, &data.val_windows)?;
    let gaussian = fit_gaussian(&res)?;

    let (metrics, scores) = match &data.test {
        Some((series, labels)) => {
            let scores = detect(
                &model,
                &gaussian,
                series,
                &DetectionConfig {
                    threshold: None,
                    stride: data.stride,
                },
            )?;
            let ls = LabeledScores::new(scores.scores.clone(), labels.clone())?;
            (Some(evaluate(&ls)?), scores)
        }
        None => (
            None,
            ScoreSeries {
                scores: Vec::new(),
                coverage: Vec::new(),
                labels: None,
            },
        ),
    };

    let row = GridRow {
        point: *point,
        val_total: Some(val_total),
        epochs_run: log.epochs.len(),
        best_epoch: log.best_epoch,
        metrics,
        error: None,
    };
    Ok((row, model, log, scores))
}
