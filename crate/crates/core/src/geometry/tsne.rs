//! Exact t-SNE: perplexity-calibrated Gaussian affinities and a Student-t
//! (one degree of freedom) layout fitted by momentum gradient descent with
//! per-coordinate gains and early exaggeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use super::{EmbeddingMatrix, GeometryError};
use crate::stats::CompensatedSum;

const ENTROPY_TOLERANCE: f64 = 1e-10;
const MAX_BANDWIDTH_STEPS: usize = 2000;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Standard deviation of the Gaussian initial layout.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            init_scale: 1e-4,
            seed: 42,
        }
    }
}

impl TsneParams {
    /// Checks the parameters against a data set of `n` points.
    pub fn validate_for(&self, n: usize) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidParams(m));
        if n < 4 {
            return Err(GeometryError::TooFewPoints { n, needed: 4 });
        }
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return bad(format!("perplexity {} must be > 0", self.perplexity));
        }
        if self.perplexity >= n as f64 / 3.0 {
            return Err(GeometryError::InvalidPerplexity {
                perplexity: self.perplexity,
                n,
                reason: "must be below n/3",
            });
        }
        if self.iterations < self.exaggeration_iters {
            return bad(format!(
                "iterations {} < exaggeration_iters {}",
                self.iterations, self.exaggeration_iters
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.early_exaggeration.is_finite() && self.early_exaggeration > 0.0) {
            return bad(format!(
                "early_exaggeration {} must be > 0",
                self.early_exaggeration
            ));
        }
        for m in [self.momentum_initial, self.momentum_final] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum {m} must lie in [0, 1)"));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad(format!("init_scale {} must be > 0", self.init_scale));
        }
        Ok(())
    }
}

/// Symmetrized joint affinities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Affinities {
    pub n: usize,
    /// Row-major `n x n`, symmetric, zero diagonal, sums to one.
    pub p: Vec<f64>,
    /// Realized perplexity `exp(H)` of each conditional row.
    pub row_perplexity: Vec<f64>,
    /// Rows whose bandwidth search could not reach the target (e.g. duplicate
    /// points); their last bandwidth is kept.
    pub clamped_rows: Vec<usize>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

fn squared_distances(matrix: &EmbeddingMatrix) -> Vec<f64> {
    let n = matrix.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = matrix
                .row(i)
                .iter()
                .zip(matrix.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    d
}

struct RowFit {
    probs: Vec<f64>,
    perplexity: f64,
    clamped: bool,
}

/// Gaussian conditional row at precision `beta`: returns (probs, entropy in nats).
fn conditional_row(dists: &[f64], skip: usize, shift: f64, beta: f64) -> (Vec<f64>, f64) {
    let mut weights = vec![0.0; dists.len()];
    let mut total = CompensatedSum::new();
    let mut weighted = CompensatedSum::new();
    for (j, &d) in dists.iter().enumerate() {
        if j == skip {
            continue;
        }
        let w = (-(d - shift) * beta).exp();
        weights[j] = w;
        total.add(w);
        weighted.add((d - shift) * w);
    }
    let total = total.total();
    let entropy = total.ln() + beta * weighted.total() / total;
    for w in &mut weights {
        *w /= total;
    }
    (weights, entropy)
}

fn calibrate_row(dists: &[f64], i: usize, target_entropy: f64) -> RowFit {
    let shift = dists
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut best = conditional_row(dists, i, shift, beta);
    let mut converged = false;
    for _ in 0..MAX_BANDWIDTH_STEPS {
        let diff = best.1 - target_entropy;
        if diff.abs() < ENTROPY_TOLERANCE {
            converged = true;
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        if !beta.is_finite() || beta == lo || beta == hi {
            break;
        }
        best = conditional_row(dists, i, shift, beta);
    }
    let (probs, entropy) = best;
    RowFit {
        probs,
        perplexity: entropy.exp(),
        clamped: !converged,
    }
}

/// Per-point bandwidths chosen by bisection so each conditional row has the
/// requested perplexity, then symmetrized into a joint distribution.
pub fn affinities(matrix: &EmbeddingMatrix, perplexity: f64) -> Result<Affinities, GeometryError> {
    let n = matrix.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints { n, needed: 4 });
    }
    if !(perplexity.is_finite() && perplexity >= 1.0) {
        return Err(GeometryError::InvalidPerplexity {
            perplexity,
            n,
            reason: "must be >= 1",
        });
    }
    if perplexity >= (n - 1) as f64 {
        return Err(GeometryError::InvalidPerplexity {
            perplexity,
            n,
            reason: "must be below n - 1",
        });
    }
    let dist = squared_distances(matrix);
    let target = perplexity.ln();
    let rows: Vec<RowFit> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(&dist[i * n..(i + 1) * n], i, target))
        .collect();

    let clamped_rows: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.clamped)
        .map(|(i, _)| i)
        .collect();
    if !clamped_rows.is_empty() {
        log::warn!(
            "t-SNE: {} rows could not reach perplexity {perplexity} (duplicate points?); bandwidth clamped",
            clamped_rows.len()
        );
    }
    let denom = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (rows[i].probs[j] + rows[j].probs[i]) / denom;
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    Ok(Affinities {
        n,
        p,
        row_perplexity: rows.iter().map(|r| r.perplexity).collect(),
        clamped_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsneRun {
    pub coords: Vec<[f64; 2]>,
    /// `KL(P || Q)` before each update and after the last one
    /// (`iterations + 1` entries, exaggeration excluded).
    pub kl_history: Vec<f64>,
}

/// Student-t kernel values and their total for the current layout.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut total = CompensatedSum::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total.add(2.0 * v);
        }
    }
    (num, total.total())
}

fn kl_divergence(p: &Affinities, num: &[f64], total: f64) -> f64 {
    let mut kl = CompensatedSum::new();
    for (idx, &pij) in p.p.iter().enumerate() {
        if pij > 0.0 {
            let q = (num[idx] / total).max(f64::MIN_POSITIVE);
            kl.add(pij * (pij / q).ln());
        }
    }
    kl.total()
}

/// Minimizes `KL(P || Q)` over 2-D layouts. Deterministic for a given seed.
pub fn tsne_embed(p: &Affinities, params: &TsneParams) -> Result<TsneRun, GeometryError> {
    let n = p.n;
    if n < 4 {
        return Err(GeometryError::TooFewPoints { n, needed: 4 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, params.init_scale)
        .map_err(|e| GeometryError::InvalidParams(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl_history = Vec::with_capacity(params.iterations + 1);

    for iteration in 0..params.iterations {
        let early = iteration < params.exaggeration_iters;
        let exaggeration = if early { params.early_exaggeration } else { 1.0 };
        let momentum = if early {
            params.momentum_initial
        } else {
            params.momentum_final
        };

        let (num, total) = student_kernel(&y);
        kl_history.push(kl_divergence(p, &num, total));

        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let idx = i * n + j;
                let w = (exaggeration * p.p[idx] - num[idx] / total) * num[idx];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }

        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                if !g.is_finite() {
                    return Err(GeometryError::NonFiniteGradient { iteration });
                }
                gains[i][d] = if (g > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * g;
                y[i][d] += update[i][d];
            }
        }
        let cx = y.iter().map(|c| c[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|c| c[1]).sum::<f64>() / n as f64;
        for c in &mut y {
            c[0] -= cx;
            c[1] -= cy;
        }
    }
    let (num, total) = student_kernel(&y);
    kl_history.push(kl_divergence(p, &num, total));
    Ok(TsneRun {
        coords: y,
        kl_history,
    })
}
