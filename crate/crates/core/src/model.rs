//! The multi-resolution ensemble autoencoder with predictive coding.
//!
//! The encoder runs one recurrent sub-encoder per resolution level on a
//! downsampled copy of the input window and aggregates their last hidden
//! states coarsest-first through per-level dense layers. The
//! reconstruction decoder mirrors the resolutions: sub-decoders emit their
//! sequence in reverse time order without teacher forcing, each step
//! feeding the previous output back in; a finer sub-decoder's hidden state
//! is blended with the aligned hidden state of the next-coarser one
//! (convex combination weighted by `beta`). A separate prediction decoder
//! consumes the input window from the shared encoding and forecasts the
//! window shifted half a length ahead.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::downsample;
use crate::diffcore::{DenseLayer, Graph, LstmCell, ParamStore, Tensor, Var};
use crate::error::{RaemepcError, Result};
use crate::losses::{sdtw_node, LossWeights, SdtwWorkspace};

/// Network hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Number of input variables (d).
    pub input_dim: usize,
    /// Window length (T).
    pub window_len: usize,
    /// Number of sub-encoders.
    pub k_enc: usize,
    /// Number of reconstruction sub-decoders; must equal `k_enc` so
    /// resolutions pair up.
    pub k_dec: usize,
    /// Resolution divisor between adjacent levels.
    pub tau: usize,
    pub hidden_dim: usize,
    /// Fusion weight on the sub-decoder's own hidden state.
    pub beta: f64,
    /// Scale of the noise added to decoder inputs during training.
    pub noise_scale: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            window_len: 64,
            k_enc: 3,
            k_dec: 3,
            tau: 4,
            hidden_dim: 32,
            beta: 0.1,
            noise_scale: 0.1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(RaemepcError::Config("input_dim must be positive".into()));
        }
        if self.window_len < 2 {
            return Err(RaemepcError::Config("window_len must be at least 2".into()));
        }
        if self.k_enc == 0 || self.k_enc != self.k_dec {
            return Err(RaemepcError::Config(format!(
                "encoder/decoder level counts must be positive and equal; got {} and {}",
                self.k_enc, self.k_dec
            )));
        }
        if self.tau < 2 {
            return Err(RaemepcError::Config(format!(
                "tau must be an integer >= 2, got {}",
                self.tau
            )));
        }
        if self.hidden_dim == 0 {
            return Err(RaemepcError::Config("hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(RaemepcError::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(RaemepcError::Config("noise_scale must be nonnegative".into()));
        }
        self.resolutions().map(|_| ())
    }

    /// Per-level sequence lengths, finest first.
    pub fn resolutions(&self) -> Result<Vec<usize>> {
        resolution_lengths(self.window_len, self.tau, self.k_enc)
    }
}

/// Lengths `round(T / tau^(k-1))` for `k = 1..=k_levels`; strictly
/// decreasing and all at least 2, otherwise a config error.
pub fn resolution_lengths(window_len: usize, tau: usize, k_levels: usize) -> Result<Vec<usize>> {
    if window_len < 2 || tau < 2 || k_levels == 0 {
        return Err(RaemepcError::Config(format!(
            "invalid resolution parameters: T={window_len}, tau={tau}, K={k_levels}"
        )));
    }
    let mut lengths = Vec::with_capacity(k_levels);
    for k in 0..k_levels {
        let denom = (tau as f64).powi(k as i32);
        let len = (window_len as f64 / denom).round() as usize;
        if len < 2 {
            return Err(RaemepcError::Config(format!(
                "resolution level {} has length {} < 2 (T={}, tau={})",
                k + 1,
                len,
                window_len,
                tau
            )));
        }
        if let Some(&prev) = lengths.last() {
            if len >= prev {
                return Err(RaemepcError::Config(format!(
                    "resolution lengths must strictly decrease; level {} has {} after {}",
                    k + 1,
                    len,
                    prev
                )));
            }
        }
        lengths.push(len);
    }
    Ok(lengths)
}

struct EncoderLevel {
    cell: LstmCell,
    aggregate: DenseLayer,
}

struct DecoderLevel {
    cell: LstmCell,
    head: DenseLayer,
    /// Present on every level except the coarsest.
    fusion: Option<DenseLayer>,
}

struct Predictor {
    cell: LstmCell,
    head: DenseLayer,
}

/// The full network: parameters plus the level structure.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    resolutions: Vec<usize>,
    encoders: Vec<EncoderLevel>,
    decoders: Vec<DecoderLevel>,
    predictor: Predictor,
}

/// Handles into a recorded forward pass.
pub struct GraphOutputs {
    /// Shared encoding, `[hidden_dim]`.
    pub encoded: Var,
    /// Per level (finest first), outputs in emission (reverse time) order.
    pub recon_emission: Vec<Vec<Var>>,
    /// Per level (finest first), `[L_k, d]` stacked in time order.
    pub recon_levels: Vec<Var>,
    /// Finest reconstruction in time order, `[T, d]`.
    pub recon_final: Var,
    /// `[T, d]` forecast, when requested.
    pub prediction: Option<Var>,
}

/// Detached forward results.
pub struct ForwardOutputs {
    pub encoded: Vec<f64>,
    /// Per level (finest first), in emission (reverse time) order.
    pub recon_per_resolution: Vec<Tensor>,
    /// `[T, d]`, time order.
    pub recon_final: Tensor,
    pub prediction: Option<Tensor>,
}

/// Loss nodes built on top of one forward pass.
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub shape: Option<Var>,
    pub pred: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = config.resolutions()?;
        let (d, h) = (config.input_dim, config.hidden_dim);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();

        let k = config.k_enc;
        let mut encoders = Vec::with_capacity(k);
        for level in 1..=k {
            let cell = LstmCell::new(&mut store, &format!("enc{level}.cell"), d, h, &mut rng);
            let aggregate =
                DenseLayer::new(&mut store, &format!("enc{level}.agg"), h, h, &mut rng);
            encoders.push(EncoderLevel { cell, aggregate });
        }
        let mut decoders = Vec::with_capacity(k);
        for level in 1..=k {
            let cell = LstmCell::new(&mut store, &format!("dec{level}.cell"), d, h, &mut rng);
            let head = DenseLayer::new(&mut store, &format!("dec{level}.head"), h, d, &mut rng);
            let fusion = (level < k).then(|| {
                DenseLayer::new(&mut store, &format!("dec{level}.fuse"), 2 * h, h, &mut rng)
            });
            decoders.push(DecoderLevel { cell, head, fusion });
        }
        let predictor = Predictor {
            cell: LstmCell::new(&mut store, "pred.cell", d, h, &mut rng),
            head: DenseLayer::new(&mut store, "pred.head", h, d, &mut rng),
        };

        Ok(Self {
            config,
            store,
            resolutions,
            encoders,
            decoders,
            predictor,
        })
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.config.window_len, self.config.input_dim] {
            return Err(RaemepcError::Shape(format!(
                "input window is {:?}, model expects [{}, {}]",
                x.shape(),
                self.config.window_len,
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Runs the sub-encoders and the hierarchical aggregation; returns the
    /// shared encoding.
    pub fn encode_graph(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let h_dim = self.config.hidden_dim;
        let levels = self.encoders.len();
        let mut last_hidden = Vec::with_capacity(levels);
        for (level, enc) in self.encoders.iter().enumerate() {
            let xk = downsample(x, self.resolutions[level])?;
            let cell = enc.cell.bind(g, &self.store);
            let mut h = g.constant(Tensor::zeros(vec![h_dim]));
            let mut c = g.constant(Tensor::zeros(vec![h_dim]));
            for t in 0..xk.rows() {
                let xt = g.constant(Tensor::vector(xk.row(t).to_vec()));
                let (h2, c2) = cell.step(g, xt, h, c)?;
                h = h2;
                c = c2;
            }
            last_hidden.push(h);
        }
        // Coarsest level first, then blend downward.
        let top = self.encoders[levels - 1].aggregate.bind(g, &self.store);
        let mut agg = top.forward(g, last_hidden[levels - 1])?;
        for level in (0..levels - 1).rev() {
            let sum = g.add(last_hidden[level], agg);
            let dense = self.encoders[level].aggregate.bind(g, &self.store);
            agg = dense.forward(g, sum)?;
        }
        Ok(agg)
    }

    /// Runs the reconstruction sub-decoders coarsest-first. Returns per
    /// level the emitted outputs (reverse time order) and the hidden state
    /// per time step.
    fn decode_recon_graph<R: Rng>(
        &self,
        g: &mut Graph,
        encoded: Var,
        mut noise: Option<&mut R>,
    ) -> Result<Vec<Vec<Var>>> {
        let h_dim = self.config.hidden_dim;
        let d = self.config.input_dim;
        let eps = self.config.noise_scale;
        let beta = self.config.beta;
        let levels = self.decoders.len();
        let mut emissions: Vec<Vec<Var>> = vec![Vec::new(); levels];
        // Hidden states of the previously decoded (coarser) level, indexed
        // by time step (0-based index t-1 holds h_t).
        let mut coarser: Option<Vec<Var>> = None;

        for level in (0..levels).rev() {
            let len = self.resolutions[level];
            let dec = &self.decoders[level];
            let cell = dec.cell.bind(g, &self.store);
            let head = dec.head.bind(g, &self.store);
            let fusion = dec.fusion.as_ref().map(|f| f.bind(g, &self.store));

            let mut hidden_by_time: Vec<Var> = vec![encoded; len];
            let mut h = encoded;
            let mut c = g.constant(Tensor::zeros(vec![h_dim]));
            let mut outputs = Vec::with_capacity(len);
            let first = head.forward(g, h)?;
            outputs.push(first);
            let mut prev_out = first;

            for t in (1..len).rev() {
                // State entering the cell: the previous hidden, blended
                // with the aligned coarser-level hidden on fused levels.
                let h_in = match (&fusion, &coarser) {
                    (Some(fuse), Some(coarse_hidden)) => {
                        let coarse_len = self.resolutions[level + 1];
                        let idx = div_ceil(t, self.config.tau).clamp(1, coarse_len);
                        let cat = g.concat(h, coarse_hidden[idx - 1]);
                        let fused = fuse.forward(g, cat)?;
                        if beta == 1.0 {
                            h
                        } else if beta == 0.0 {
                            fused
                        } else {
                            let own = g.scale(h, beta);
                            let other = g.scale(fused, 1.0 - beta);
                            g.add(own, other)
                        }
                    }
                    _ => h,
                };
                let input = match noise.as_mut() {
                    Some(rng) if eps > 0.0 => {
                        let delta: Vec<f64> = (0..d)
                            .map(|_| eps * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let n = g.constant(Tensor::vector(delta));
                        g.add(prev_out, n)
                    }
                    _ => prev_out,
                };
                let (h2, c2) = cell.step(g, input, h_in, c)?;
                h = h2;
                c = c2;
                hidden_by_time[t - 1] = h;
                let y = head.forward(g, h)?;
                outputs.push(y);
                prev_out = y;
            }
            emissions[level] = outputs;
            coarser = Some(hidden_by_time);
        }
        Ok(emissions)
    }

    /// Runs the prediction decoder over the input window from the shared
    /// encoding; one output row per time step.
    pub fn decode_prediction_graph(&self, g: &mut Graph, encoded: Var, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let h_dim = self.config.hidden_dim;
        let cell = self.predictor.cell.bind(g, &self.store);
        let head = self.predictor.head.bind(g, &self.store);
        let mut h = encoded;
        let mut c = g.constant(Tensor::zeros(vec![h_dim]));
        let mut rows = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let xt = g.constant(Tensor::vector(x.row(t).to_vec()));
            let (h2, c2) = cell.step(g, xt, h, c)?;
            h = h2;
            c = c2;
            rows.push(head.forward(g, h)?);
        }
        Ok(g.stack_rows(&rows))
    }

    /// Records a full forward pass on `g`. Noise is injected into decoder
    /// inputs only when `noise` is provided (training mode).
    pub fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph,
        x: &Tensor,
        noise: Option<&mut R>,
        with_prediction: bool,
    ) -> Result<GraphOutputs> {
        let encoded = self.encode_graph(g, x)?;
        let emissions = self.decode_recon_graph(g, encoded, noise)?;
        let mut recon_levels = Vec::with_capacity(emissions.len());
        for outputs in &emissions {
            let time_order: Vec<Var> = outputs.iter().rev().copied().collect();
            recon_levels.push(g.stack_rows(&time_order));
        }
        let recon_final = recon_levels[0];
        let prediction = if with_prediction {
            Some(self.decode_prediction_graph(g, encoded, x)?)
        } else {
            None
        };
        Ok(GraphOutputs {
            encoded,
            recon_emission: emissions,
            recon_levels,
            recon_final,
            prediction,
        })
    }

    /// Inference-mode forward pass returning detached values.
    pub fn forward(&self, x: &Tensor, with_prediction: bool) -> Result<ForwardOutputs> {
        let mut g = Graph::new();
        let out =
            self.forward_graph::<rand_chacha::ChaCha20Rng>(&mut g, x, None, with_prediction)?;
        let recon_per_resolution = out
            .recon_levels
            .iter()
            .map(|v| g.value(*v).reverse_rows())
            .collect();
        Ok(ForwardOutputs {
            encoded: g.value(out.encoded).data().to_vec(),
            recon_per_resolution,
            recon_final: g.value(out.recon_final).clone(),
            prediction: out.prediction.map(|p| g.value(p).clone()),
        })
    }

    /// Builds the training loss on top of a recorded forward pass:
    /// reconstruction error, the shape term over the coarser levels, and
    /// the prediction error when the window has a lookahead target.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        outputs: &GraphOutputs,
        x: &Tensor,
        future: Option<&Tensor>,
        weights: &LossWeights,
        ws: &mut SdtwWorkspace,
    ) -> Result<LossVars> {
        let x_const = g.constant(x.clone());
        let recon = g.sum_squared_diff(outputs.recon_final, x_const);
        let mut total = recon;

        let shape = if weights.lambda_shape > 0.0 && outputs.recon_levels.len() > 1 {
            let mut terms = Vec::new();
            for level_stack in &outputs.recon_levels[1..] {
                terms.push(sdtw_node(g, x_const, *level_stack, weights.gamma, ws)?);
            }
            let sum = g.add_n(&terms);
            let mean = g.scale(sum, 1.0 / terms.len() as f64);
            let weighted = g.scale(mean, weights.lambda_shape);
            total = g.add(total, weighted);
            Some(mean)
        } else {
            None
        };

        let pred = match (&outputs.prediction, future) {
            (Some(p), Some(f)) => {
                let f_const = g.constant(f.clone());
                let term = g.sum_squared_diff(*p, f_const);
                let weighted = g.scale(term, weights.lambda_pred);
                total = g.add(total, weighted);
                Some(term)
            }
            _ => None,
        };

        Ok(LossVars {
            total,
            recon,
            shape,
            pred,
        })
    }
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}
