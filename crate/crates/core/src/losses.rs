//! Training losses: reconstruction and prediction squared errors, the
//! smoothed dynamic-time-warping distance, and their weighted total.
//!
//! The smoothed DTW replaces the min in the classic alignment recursion
//! with a soft minimum, `softmin_g(x) = -g * log(sum exp(-x_i/g))`, making
//! the distance differentiable in both input sequences. The forward pass
//! fills the usual (n+1)x(m+1) table; the backward pass propagates
//! alignment weights through a second table in reverse, yielding the
//! gradient of the distance with respect to every pairwise cost and, by
//! the chain rule, both sequences. Pairwise costs are squared Euclidean
//! distances, which keeps the gradient smooth when sequences touch.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{RaemepcError, Result};

/// Weights of the total loss plus the sDTW smoothing parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    #[serde(default = "default_lambda_shape")]
    pub lambda_shape: f64,
    #[serde(default = "default_lambda_pred")]
    pub lambda_pred: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_lambda_shape() -> f64 {
    0.001
}

fn default_lambda_pred() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    0.01
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_shape: 0.001,
            lambda_pred: 1.0,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_shape < 0.0 || self.lambda_pred < 0.0 {
            return Err(RaemepcError::Config(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.gamma <= 0.0 {
            return Err(RaemepcError::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Reusable buffers for the sDTW dynamic programs: the pairwise cost
/// matrix, the soft-alignment accumulator R, and the alignment-gradient
/// table E.
#[derive(Default)]
pub struct SdtwWorkspace {
    cost: Vec<f64>,
    r: Vec<f64>,
    e: Vec<f64>,
}

impl SdtwWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn check(a: &Tensor, b: &Tensor, gamma: f64) -> Result<(usize, usize, usize)> {
        if gamma <= 0.0 {
            return Err(RaemepcError::Argument(format!(
                "sdtw gamma must be positive, got {gamma}"
            )));
        }
        let (n, m) = (a.rows(), b.rows());
        if n == 0 || m == 0 {
            return Err(RaemepcError::Argument("sdtw on empty sequence".into()));
        }
        if a.cols() != b.cols() {
            return Err(RaemepcError::Shape(format!(
                "sdtw dimensions differ: {} vs {}",
                a.cols(),
                b.cols()
            )));
        }
        Ok((n, m, a.cols()))
    }

    /// Forward pass only; fills `cost` and `r`, returns the distance.
    pub fn forward(&mut self, a: &Tensor, b: &Tensor, gamma: f64) -> Result<f64> {
        let (n, m, d) = Self::check(a, b, gamma)?;
        self.cost.clear();
        self.cost.resize(n * m, 0.0);
        for i in 0..n {
            let ra = a.row(i);
            for j in 0..m {
                let rb = b.row(j);
                let mut s = 0.0;
                for k in 0..d {
                    let diff = ra[k] - rb[k];
                    s += diff * diff;
                }
                self.cost[i * m + j] = s;
            }
        }

        let w = m + 1;
        self.r.clear();
        self.r.resize((n + 1) * w, f64::INFINITY);
        self.r[0] = 0.0;
        for i in 1..=n {
            for j in 1..=m {
                let c = self.cost[(i - 1) * m + (j - 1)];
                let prev = softmin3(
                    self.r[(i - 1) * w + (j - 1)],
                    self.r[(i - 1) * w + j],
                    self.r[i * w + (j - 1)],
                    gamma,
                );
                self.r[i * w + j] = c + prev;
            }
        }
        Ok(self.r[n * w + m])
    }

    /// Forward plus backward: returns the distance and the gradients with
    /// respect to both sequences, flattened row-major.
    pub fn with_grads(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        gamma: f64,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let value = self.forward(a, b, gamma)?;
        let (n, m, d) = Self::check(a, b, gamma)?;
        let w = m + 1;

        // E is padded to (n+2)x(m+2). The reverse recursion treats moves
        // off the bottom/right edge as zero-weight except the terminal
        // cell, which is seeded with weight 1.
        let ew = m + 2;
        self.e.clear();
        self.e.resize((n + 2) * ew, 0.0);
        self.e[(n + 1) * ew + (m + 1)] = 1.0;

        // Padded accessors over R and the cost matrix.
        let r_at = |i: usize, j: usize| -> f64 {
            if i == n + 1 && j == m + 1 {
                self.r[n * w + m]
            } else if i == n + 1 || j == m + 1 {
                f64::NEG_INFINITY
            } else {
                self.r[i * w + j]
            }
        };
        let c_at = |i: usize, j: usize| -> f64 {
            if i == n + 1 || j == m + 1 {
                0.0
            } else {
                self.cost[(i - 1) * m + (j - 1)]
            }
        };

        for j in (1..=m).rev() {
            for i in (1..=n).rev() {
                let rij = self.r[i * w + j];
                let down = ((r_at(i + 1, j) - rij - c_at(i + 1, j)) / gamma).exp();
                let right = ((r_at(i, j + 1) - rij - c_at(i, j + 1)) / gamma).exp();
                let diag = ((r_at(i + 1, j + 1) - rij - c_at(i + 1, j + 1)) / gamma).exp();
                self.e[i * ew + j] = self.e[(i + 1) * ew + j] * down
                    + self.e[i * ew + (j + 1)] * right
                    + self.e[(i + 1) * ew + (j + 1)] * diag;
            }
        }

        // d(cost[i][j])/d(a_i) = 2 (a_i - b_j); chain through E.
        let mut ga = vec![0.0; n * d];
        let mut gb = vec![0.0; m * d];
        for i in 0..n {
            let ra = a.row(i);
            for j in 0..m {
                let weight = self.e[(i + 1) * ew + (j + 1)];
                if weight == 0.0 {
                    continue;
                }
                let rb = b.row(j);
                for k in 0..d {
                    let diff = 2.0 * weight * (ra[k] - rb[k]);
                    ga[i * d + k] += diff;
                    gb[j * d + k] -= diff;
                }
            }
        }
        Ok((value, ga, gb))
    }
}

/// Numerically stable three-way soft minimum.
fn softmin3(x: f64, y: f64, z: f64, gamma: f64) -> f64 {
    let mn = x.min(y).min(z);
    if mn.is_infinite() {
        return mn;
    }
    let s = (-(x - mn) / gamma).exp() + (-(y - mn) / gamma).exp() + (-(z - mn) / gamma).exp();
    mn - gamma * s.ln()
}

/// Smoothed DTW distance between `a` (`[n, d]`) and `b` (`[m, d]`).
pub fn sdtw(a: &Tensor, b: &Tensor, gamma: f64) -> Result<f64> {
    SdtwWorkspace::new().forward(a, b, gamma)
}

/// Smoothed DTW as a graph node; gradients flow to both sequences.
pub fn sdtw_node(g: &mut Graph, a: Var, b: Var, gamma: f64, ws: &mut SdtwWorkspace) -> Result<Var> {
    let (value, ga, gb) = {
        let (av, bv) = (g.value(a).clone(), g.value(b).clone());
        ws.with_grads(&av, &bv, gamma)?
    };
    if !value.is_finite() {
        return Err(RaemepcError::Numerical(format!(
            "sdtw produced non-finite value {value}"
        )));
    }
    Ok(g.precomputed_scalar(value, vec![(a, ga), (b, gb)]))
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RaemepcError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Sum over time of squared Euclidean norms of the reconstruction error.
pub fn recon_loss(reconstruction: &Tensor, input: &Tensor) -> Result<f64> {
    check_same_shape(reconstruction, input)?;
    Ok(reconstruction
        .data()
        .iter()
        .zip(input.data())
        .map(|(y, x)| (y - x) * (y - x))
        .sum())
}

/// Mean sDTW between the input and each lower-resolution reconstruction
/// (all sub-decoders except the finest). Zero with a single resolution.
pub fn shape_loss(input: &Tensor, coarse_reconstructions: &[Tensor], gamma: f64) -> Result<f64> {
    if coarse_reconstructions.is_empty() {
        return Ok(0.0);
    }
    let mut ws = SdtwWorkspace::new();
    let mut total = 0.0;
    for y in coarse_reconstructions {
        total += ws.forward(input, y, gamma)?;
    }
    Ok(total / coarse_reconstructions.len() as f64)
}

/// Sum over time of squared prediction error against the lookahead slice.
pub fn pred_loss(prediction: &Tensor, future: &Tensor) -> Result<f64> {
    check_same_shape(prediction, future)?;
    Ok(prediction
        .data()
        .iter()
        .zip(future.data())
        .map(|(y, x)| (y - x) * (y - x))
        .sum())
}

/// `recon + lambda_shape * shape + lambda_pred * pred`.
pub fn total_loss(recon: f64, shape: f64, pred: f64, weights: &LossWeights) -> f64 {
    recon + weights.lambda_shape * shape + weights.lambda_pred * pred
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Minimum cost over every monotone alignment path, by explicit
    /// enumeration. Exponential; for oracle use on short sequences only.
    pub(crate) fn dtw_brute_force(a: &Tensor, b: &Tensor) -> f64 {
        fn sqdist(a: &Tensor, b: &Tensor, i: usize, j: usize) -> f64 {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        }
        fn walk(a: &Tensor, b: &Tensor, i: usize, j: usize) -> f64 {
            let here = sqdist(a, b, i, j);
            let (n, m) = (a.rows(), b.rows());
            if i == n - 1 && j == m - 1 {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < n {
                best = best.min(walk(a, b, i + 1, j));
            }
            if j + 1 < m {
                best = best.min(walk(a, b, i, j + 1));
            }
            if i + 1 < n && j + 1 < m {
                best = best.min(walk(a, b, i + 1, j + 1));
            }
            here + best
        }
        walk(a, b, 0, 0)
    }

    fn random_seq(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let data = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn single_cell_is_the_squared_cost() {
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(sdtw(&a, &b, 0.5).unwrap(), 9.0);
    }

    #[test]
    fn identical_constant_sequences_give_small_negative_value() {
        let a = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let v1 = sdtw(&a, &a, 0.1).unwrap();
        assert!(v1 <= 0.0, "got {v1}");
        let v2 = sdtw(&a, &a, 0.001).unwrap();
        assert!(v2 <= 0.0 && v2 > -0.1);
        assert!(v2.abs() < v1.abs(), "smaller gamma should be closer to 0");
    }

    #[test]
    fn small_gamma_matches_brute_force_paths() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(1..=4usize);
            let m = rng.gen_range(1..=3usize);
            let d = rng.gen_range(1..=3usize);
            let a = random_seq(&mut rng, n, d);
            let b = random_seq(&mut rng, m, d);
            let soft = sdtw(&a, &b, 0.001).unwrap();
            let exact = dtw_brute_force(&a, &b);
            assert!(
                (soft - exact).abs() < 1e-2,
                "sdtw {soft} vs brute force {exact}"
            );
        }
    }

    #[test]
    fn sdtw_lower_bounds_exact_dtw_and_converges() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_seq(&mut rng, 5, 2);
            let b = random_seq(&mut rng, 4, 2);
            let exact = dtw_brute_force(&a, &b);
            let mut prev = f64::NEG_INFINITY;
            for gamma in [1.0, 0.1, 0.01, 0.001] {
                let soft = sdtw(&a, &b, gamma).unwrap();
                assert!(soft <= exact + 1e-12, "soft {soft} above exact {exact}");
                assert!(soft >= prev - 1e-12, "not monotone in gamma");
                prev = soft;
            }
            assert!((prev - exact).abs() < 1e-2);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut ws = SdtwWorkspace::new();
        for gamma in [0.1, 1.0] {
            let a = random_seq(&mut rng, 5, 5);
            let b = random_seq(&mut rng, 5, 5);
            let (_, ga, gb) = ws.with_grads(&a, &b, gamma).unwrap();
            let h = 1e-5;
            for idx in 0..a.len() {
                let mut ap = a.clone();
                ap.data_mut()[idx] += h;
                let mut am = a.clone();
                am.data_mut()[idx] -= h;
                let fd = (sdtw(&ap, &b, gamma).unwrap() - sdtw(&am, &b, gamma).unwrap()) / (2.0 * h);
                let rel = (ga[idx] - fd).abs() / ga[idx].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-3, "grad a[{idx}]: {} vs fd {}", ga[idx], fd);
            }
            for idx in 0..b.len() {
                let mut bp = b.clone();
                bp.data_mut()[idx] += h;
                let mut bm = b.clone();
                bm.data_mut()[idx] -= h;
                let fd = (sdtw(&a, &bp, gamma).unwrap() - sdtw(&a, &bm, gamma).unwrap()) / (2.0 * h);
                let rel = (gb[idx] - fd).abs() / gb[idx].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-3, "grad b[{idx}]: {} vs fd {}", gb[idx], fd);
            }
        }
    }

    #[test]
    fn sdtw_rejects_bad_arguments() {
        let a = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(sdtw(&a, &a, 0.0).is_err());
        assert!(sdtw(&a, &a, -1.0).is_err());
        assert!(sdtw(&a, &b, 0.1).is_err());
    }

    #[test]
    fn recon_loss_examples() {
        let x = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let y = Tensor::matrix(2, 2, vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(recon_loss(&y, &x).unwrap(), 4.0);

        // Random 3x2 pair against a hand-written accumulation.
        let a = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.0, 1.0, -2.0, 0.5, 0.25, 0.5]).unwrap();
        let mut expect = 0.0;
        for t in 0..3 {
            for k in 0..2 {
                let d = a.row(t)[k] - b.row(t)[k];
                expect += d * d;
            }
        }
        assert!((recon_loss(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn pred_loss_constant_offset() {
        let t = 5;
        let d = 3;
        let y = Tensor::matrix(t, d, vec![1.0; t * d]).unwrap();
        let x = Tensor::matrix(t, d, vec![0.0; t * d]).unwrap();
        assert_eq!(pred_loss(&y, &x).unwrap(), (t * d) as f64);
        assert_eq!(pred_loss(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn shape_loss_empty_is_zero() {
        let x = Tensor::matrix(4, 1, vec![0.0; 4]).unwrap();
        assert_eq!(shape_loss(&x, &[], 0.01).unwrap(), 0.0);
    }

    #[test]
    fn shape_loss_against_own_downsample_approaches_brute_force() {
        // Two levels where the coarse reconstruction equals the input's
        // own downsample: at small gamma the shape loss approaches the
        // minimum alignment cost between the input and that downsample.
        let x = Tensor::matrix(6, 1, vec![0.0, 0.8, -0.4, 1.2, 0.3, -0.9]).unwrap();
        let coarse = crate::data::downsample(&x, 3).unwrap();
        let loss = shape_loss(&x, &[coarse.clone()], 0.001).unwrap();
        let exact = dtw_brute_force(&x, &coarse);
        assert!(
            (loss - exact).abs() < 1e-2,
            "shape loss {loss} vs brute-force alignment {exact}"
        );
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights {
            lambda_shape: 0.001,
            lambda_pred: 1.0,
            gamma: 0.01,
        };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 4.002).abs() < 1e-15);
        let zero = LossWeights {
            lambda_shape: 0.0,
            lambda_pred: 0.0,
            gamma: 0.01,
        };
        assert_eq!(total_loss(1.5, 9.0, 9.0, &zero), 1.5);
    }

    #[test]
    fn sdtw_node_routes_gradients_into_graph() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![0.5, 2.0]).unwrap());
        let mut ws = SdtwWorkspace::new();
        let v = sdtw_node(&mut g, a, b, 0.1, &mut ws).unwrap();
        g.backward(v).unwrap();
        let (_, ga, gb) = ws
            .with_grads(
                &Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
                &Tensor::matrix(2, 1, vec![0.5, 2.0]).unwrap(),
                0.1,
            )
            .unwrap();
        assert_eq!(g.grad(a).unwrap(), ga.as_slice());
        assert_eq!(g.grad(b).unwrap(), gb.as_slice());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sdtw_is_symmetric(
            av in proptest::collection::vec(-3.0f64..3.0, 1..6),
            bv in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let a = Tensor::matrix(av.len(), 1, av.clone()).unwrap();
            let b = Tensor::matrix(bv.len(), 1, bv.clone()).unwrap();
            let ab = sdtw(&a, &b, 0.1).unwrap();
            let ba = sdtw(&b, &a, 0.1).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
        }

        #[test]
        fn squared_losses_are_nonnegative_and_zero_iff_equal(
            vals in proptest::collection::vec(-5.0f64..5.0, 2..20),
        ) {
            let n = vals.len();
            let a = Tensor::matrix(n, 1, vals.clone()).unwrap();
            let z = Tensor::matrix(n, 1, vec![0.0; n]).unwrap();
            let l = recon_loss(&a, &z).unwrap();
            prop_assert!(l >= 0.0);
            let same = recon_loss(&a, &a).unwrap();
            prop_assert_eq!(same, 0.0);
            if vals.iter().any(|v| *v != 0.0) {
                prop_assert!(l > 0.0);
            }
        }
    }
}
