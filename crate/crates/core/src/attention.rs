//! Attention-entropy diagnostics: per-token Shannon entropy of attention rows,
//! head averaging, layerwise Pearson correlation with token concreteness and a
//! four-parameter logistic fit of r across layers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::norms::{propagate_subwords, NormsError, Scorer, SubwordAlignment};
use crate::stats::{self, CompensatedSum, StatsError};
use crate::tensor::{Tensor, TensorError};

const ROW_SUM_TOLERANCE: f64 = 1e-5;
const NEGATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention row has negative entry {0}")]
    NegativeEntry(f64),
    #[error("attention row sums to zero")]
    ZeroSum,
    #[error("attention row (head {head}, token {token}) sums to {sum}, expected 1")]
    RowSum { head: usize, token: usize, sum: f64 },
    #[error("causal tensor has weight {value} above the diagonal at (head {head}, token {token})")]
    NotCausal { head: usize, token: usize, value: f64 },
    #[error("bad shape: {0}")]
    Shape(String),
    #[error("container is missing {0}")]
    MissingMeta(&'static str),
    #[error("sequence {0:?}: {1}")]
    Sequence(String, String),
    #[error("no layer has a defined correlation")]
    NoDefinedLayers,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norms(#[from] NormsError),
}

/// Shannon entropy in nats of a probability row; `0 ln 0 = 0`. The row is
/// renormalized first.
pub fn entropy(row: &[f64]) -> Result<f64, AttentionError> {
    let mut total = CompensatedSum::new();
    for &p in row {
        if p.is_nan() || p < -NEGATIVE_TOLERANCE {
            return Err(AttentionError::NegativeEntry(p));
        }
        total.add(p.max(0.0));
    }
    let total = total.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(AttentionError::ZeroSum);
    }
    let mut h = CompensatedSum::new();
    for &p in row {
        let q = p.max(0.0) / total;
        if q > 0.0 {
            h.add(-q * q.ln());
        }
    }
    Ok(h.total().max(0.0))
}

/// One layer's attention weights, `heads x tokens x tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layer: usize,
    heads: usize,
    tokens: usize,
    data: Vec<f64>,
    pub causal: bool,
}

impl AttentionTensor {
    pub fn new(
        layer: usize,
        heads: usize,
        tokens: usize,
        data: Vec<f64>,
        causal: bool,
    ) -> Result<Self, AttentionError> {
        if heads == 0 || tokens == 0 || data.len() != heads * tokens * tokens {
            return Err(AttentionError::Shape(format!(
                "{} values for {heads} heads x {tokens} x {tokens}",
                data.len()
            )));
        }
        let t = Self {
            layer,
            heads,
            tokens,
            data,
            causal,
        };
        for h in 0..heads {
            for i in 0..tokens {
                let full = t.row(h, i);
                if t.causal {
                    if let Some(&value) = full[i + 1..].iter().find(|v| v.abs() > NEGATIVE_TOLERANCE) {
                        return Err(AttentionError::NotCausal { head: h, token: i, value });
                    }
                }
                if let Some(&v) = full.iter().find(|&&v| v.is_nan() || v < -NEGATIVE_TOLERANCE) {
                    return Err(AttentionError::NegativeEntry(v));
                }
                let sum: f64 = t.support(h, i).iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(AttentionError::RowSum { head: h, token: i, sum });
                }
            }
        }
        Ok(t)
    }

    /// Reads a `[H, T, T]` container with `layer` and `causal` in its meta.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self, AttentionError> {
        let [heads, t1, t2] = tensor.shape[..] else {
            return Err(AttentionError::Shape(format!("expected [H,T,T], got {:?}", tensor.shape)));
        };
        if t1 != t2 {
            return Err(AttentionError::Shape(format!("non-square attention {t1}x{t2}")));
        }
        let layer = tensor
            .meta_u64("layer")
            .ok_or(AttentionError::MissingMeta("\"layer\""))? as usize;
        let causal = tensor.meta_bool("causal").unwrap_or(false);
        Self::new(
            layer,
            heads,
            t1,
            tensor.data.iter().map(|&v| f64::from(v)).collect(),
            causal,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn row(&self, head: usize, token: usize) -> &[f64] {
        let start = (head * self.tokens + token) * self.tokens;
        &self.data[start..start + self.tokens]
    }

    /// The realized support of a row: keys `j <= i` for causal tensors.
    pub fn support(&self, head: usize, token: usize) -> &[f64] {
        let row = self.row(head, token);
        if self.causal {
            &row[..=token]
        } else {
            row
        }
    }
}

/// Head-averaged entropy per query token.
pub fn head_average_entropy(tensor: &AttentionTensor) -> Result<Vec<f64>, AttentionError> {
    (0..tensor.tokens)
        .map(|i| {
            let mut acc = CompensatedSum::new();
            for h in 0..tensor.heads {
                acc.add(entropy(tensor.support(h, i))?);
            }
            Ok(acc.total() / tensor.heads as f64)
        })
        .collect()
}

/// Head-averaged entropy divided by `ln(support size)`; a single-key support
/// has entropy 0 and maps to 0.
pub fn head_average_entropy_normalized(tensor: &AttentionTensor) -> Result<Vec<f64>, AttentionError> {
    let raw = head_average_entropy(tensor)?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let support = if tensor.causal { i + 1 } else { tensor.tokens };
            if support > 1 {
                h / (support as f64).ln()
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    #[default]
    Raw,
    /// Divided by the log of the realized support size.
    LengthNormalized,
}

/// Head-averaged entropies for one input sequence across layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropySheet {
    pub sequence: String,
    pub layers: usize,
    pub tokens: usize,
    /// Row-major `layers x tokens`.
    pub values: Vec<f64>,
    pub token_concreteness: Vec<f64>,
    pub token_words: Vec<String>,
}

impl EntropySheet {
    pub fn new(
        sequence: impl Into<String>,
        layers: usize,
        values: Vec<f64>,
        token_words: Vec<String>,
        token_concreteness: Vec<f64>,
    ) -> Result<Self, AttentionError> {
        let sequence = sequence.into();
        let tokens = token_words.len();
        let fail = |m: String| AttentionError::Sequence(sequence.clone(), m);
        if layers == 0 || tokens == 0 || values.len() != layers * tokens {
            return Err(fail(format!(
                "{} entropy values for {layers} layers x {tokens} tokens",
                values.len()
            )));
        }
        if token_concreteness.len() != tokens {
            return Err(fail(format!(
                "{} concreteness labels for {tokens} tokens",
                token_concreteness.len()
            )));
        }
        let ceiling = (tokens as f64).ln() + 1e-9;
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0 && **v <= ceiling)) {
            return Err(fail(format!("entropy {v} outside [0, ln T]")));
        }
        Ok(Self {
            sequence,
            layers,
            tokens,
            values,
            token_concreteness,
            token_words,
        })
    }

    /// Builds a sheet from one sequence's per-layer tensors (any order).
    pub fn from_layers(
        sequence: impl Into<String>,
        tensors: &[AttentionTensor],
        token_words: Vec<String>,
        token_concreteness: Vec<f64>,
        mode: EntropyMode,
    ) -> Result<Self, AttentionError> {
        let sequence = sequence.into();
        let mut ordered: Vec<&AttentionTensor> = tensors.iter().collect();
        ordered.sort_by_key(|t| t.layer);
        for (expected, t) in ordered.iter().enumerate() {
            if t.layer != expected {
                return Err(AttentionError::Sequence(
                    sequence,
                    format!("layers are not 0..{}: found {}", tensors.len(), t.layer),
                ));
            }
            if t.tokens != token_words.len() {
                return Err(AttentionError::Sequence(
                    sequence,
                    format!("layer {} has {} tokens, labels have {}", t.layer, t.tokens, token_words.len()),
                ));
            }
        }
        let per_layer: Vec<Vec<f64>> = ordered
            .par_iter()
            .map(|t| match mode {
                EntropyMode::Raw => head_average_entropy(t),
                EntropyMode::LengthNormalized => head_average_entropy_normalized(t),
            })
            .collect::<Result<_, _>>()?;
        Self::new(
            sequence,
            ordered.len(),
            per_layer.concat(),
            token_words,
            token_concreteness,
        )
    }

    pub fn at(&self, layer: usize, token: usize) -> f64 {
        self.values[layer * self.tokens + token]
    }
}

/// Concreteness for each subtoken: words are scored at their word position and
/// the score is copied onto every subtoken of that word.
pub fn label_tokens(
    token_words: &[String],
    word_index: Option<&[usize]>,
    scorer: &Scorer<'_>,
) -> Result<Vec<f64>, AttentionError> {
    let alignment = match word_index {
        Some(idx) => {
            if idx.len() != token_words.len() {
                return Err(AttentionError::Shape(format!(
                    "{} word indices for {} tokens",
                    idx.len(),
                    token_words.len()
                )));
            }
            SubwordAlignment::new(idx.to_vec())?
        }
        None => SubwordAlignment::identity(token_words.len()),
    };
    let mut words = Vec::with_capacity(alignment.n_words());
    for (sub, &w) in alignment.word_indices().iter().enumerate() {
        if w == words.len() {
            words.push(scorer.classify(&token_words[sub], w)?);
        }
    }
    Ok(propagate_subwords(&words, &alignment)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Groups attention containers into per-model entropy sheets.
///
/// Raw containers (`kind = "attention"`, shape `[H, T, T]`) are grouped by
/// `(model_id, sequence)` and reduced layer by layer; entropy-sheet containers
/// (`kind = "entropy_sheet"`, shape `[L, T]`) are taken as computed. Token
/// labels come from the `words` and optional `word_index` meta fields.
pub fn collect_sheets(
    tensors: &[Tensor],
    scorer: &Scorer<'_>,
    mode: EntropyMode,
) -> Result<BTreeMap<String, Vec<EntropySheet>>, AttentionError> {
    type Key = (String, String);
    let mut raw: BTreeMap<Key, Vec<&Tensor>> = BTreeMap::new();
    let mut out: BTreeMap<String, Vec<EntropySheet>> = BTreeMap::new();
    for t in tensors {
        let model = t
            .meta_str("model_id")
            .ok_or(AttentionError::MissingMeta("\"model_id\""))?
            .to_owned();
        let sequence = t
            .meta_str("sequence")
            .ok_or(AttentionError::MissingMeta("\"sequence\""))?
            .to_owned();
        match t.meta_str("kind").unwrap_or("attention") {
            "entropy_sheet" => {
                let [layers, tokens] = t.shape[..] else {
                    return Err(AttentionError::Shape(format!("expected [L,T], got {:?}", t.shape)));
                };
                let words = t
                    .meta_strings("words")
                    .ok_or(AttentionError::MissingMeta("\"words\""))?;
                if words.len() != tokens {
                    return Err(AttentionError::Shape(format!("{} words for {tokens} tokens", words.len())));
                }
                let labels = label_tokens(&words, t.meta_indices("word_index").as_deref(), scorer)?;
                let values = t.data.iter().map(|&v| f64::from(v)).collect();
                out.entry(model)
                    .or_default()
                    .push(EntropySheet::new(sequence, layers, values, words, labels)?);
            }
            _ => raw.entry((model, sequence)).or_default().push(t),
        }
    }
    let built: Vec<(String, EntropySheet)> = raw
        .into_par_iter()
        .map(|((model, sequence), group)| {
            let words = group
                .iter()
                .find_map(|t| t.meta_strings("words"))
                .ok_or(AttentionError::MissingMeta("\"words\""))?;
            let word_index = group.iter().find_map(|t| t.meta_indices("word_index"));
            let labels = label_tokens(&words, word_index.as_deref(), scorer)?;
            let layers: Vec<AttentionTensor> = group
                .iter()
                .map(|t| AttentionTensor::from_tensor(t))
                .collect::<Result<_, _>>()?;
            let sheet = EntropySheet::from_layers(sequence, &layers, words, labels, mode)?;
            Ok((model, sheet))
        })
        .collect::<Result<_, AttentionError>>()?;
    for (model, sheet) in built {
        out.entry(model).or_default().push(sheet);
    }
    for sheets in out.values_mut() {
        sheets.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// `None` when the layer has too few tokens or a constant series.
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorrelationOptions {
    pub min_n: usize,
    /// Keep tokens whose concreteness is 0 (function words, unknown words).
    pub include_zero_scored: bool,
    /// Average per-sequence r instead of pooling tokens across sequences.
    pub per_question: bool,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            min_n: 10,
            include_zero_scored: false,
            per_question: false,
        }
    }
}

fn layer_series(sheet: &EntropySheet, layer: usize, include_zero: bool) -> (Vec<f64>, Vec<f64>) {
    (0..sheet.tokens)
        .filter(|&i| include_zero || sheet.token_concreteness[i] != 0.0)
        .map(|i| (sheet.token_concreteness[i], sheet.at(layer, i)))
        .unzip()
}

/// Pearson r between token concreteness and entropy, one entry per layer.
pub fn layer_correlations(
    sheets: &[EntropySheet],
    options: &CorrelationOptions,
) -> Result<Vec<LayerCorrelation>, AttentionError> {
    let first = sheets.first().ok_or(AttentionError::TooFewPoints { needed: 1, got: 0 })?;
    if let Some(s) = sheets.iter().find(|s| s.layers != first.layers) {
        return Err(AttentionError::Sequence(
            s.sequence.clone(),
            format!("{} layers, expected {}", s.layers, first.layers),
        ));
    }
    let min_n = options.min_n.max(3);
    Ok((0..first.layers)
        .map(|layer| {
            if options.per_question {
                let mut n = 0;
                let rs: Vec<f64> = sheets
                    .iter()
                    .filter_map(|s| {
                        let (c, h) = layer_series(s, layer, options.include_zero_scored);
                        n += c.len();
                        (c.len() >= min_n).then(|| stats::pearson(&c, &h).ok()).flatten().map(|r| r.r)
                    })
                    .collect();
                LayerCorrelation {
                    layer,
                    r: stats::mean(&rs),
                    p: None,
                    n,
                }
            } else {
                let mut c = Vec::new();
                let mut h = Vec::new();
                for s in sheets {
                    let (cs, hs) = layer_series(s, layer, options.include_zero_scored);
                    c.extend(cs);
                    h.extend(hs);
                }
                let n = c.len();
                let fit = if n >= min_n {
                    match stats::pearson(&c, &h) {
                        Ok(fit) => Some(fit),
                        Err(StatsError::ZeroVariance(_)) => None,
                        Err(_) => None,
                    }
                } else {
                    None
                };
                LayerCorrelation {
                    layer,
                    r: fit.map(|f| f.r),
                    p: fit.map(|f| f.p),
                    n,
                }
            }
        })
        .collect())
}

/// Mean of the defined per-layer r values.
pub fn mean_layer_r(correlations: &[LayerCorrelation]) -> Result<f64, AttentionError> {
    let rs: Vec<f64> = correlations.iter().filter_map(|c| c.r).collect();
    stats::mean(&rs).ok_or(AttentionError::NoDefinedLayers)
}

/// `r(l) ~ a + (b - a) / (1 + exp(-d (l - c)))`, reported with `d >= 0` so `a`
/// is the early-layer asymptote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmoidFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub residual_sse: f64,
    pub converged: bool,
    /// Flat data: the slope and midpoint carry no information.
    pub degenerate: bool,
    pub iterations: usize,
}

impl SigmoidFit {
    pub fn eval(&self, layer: f64) -> f64 {
        sigmoid_curve([self.a, self.b, self.c, self.d], layer)
    }
}

fn sigmoid_curve(p: [f64; 4], x: f64) -> f64 {
    let [a, b, c, d] = p;
    a + (b - a) / (1.0 + (-d * (x - c)).exp())
}

fn sse(p: [f64; 4], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - sigmoid_curve(p, xi)).powi(2))
        .collect::<CompensatedSum>()
        .total()
}

/// Solves a 4x4 symmetric system by Gaussian elimination with partial pivoting.
fn solve4(mut m: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..4 {
            let f = m[row][col] / m[col][col];
            let pivot_row = m[col];
            for (v, p) in m[row].iter_mut().zip(pivot_row).skip(col) {
                *v -= f * p;
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = ((row + 1)..4).map(|k| m[row][k] * out[k]).sum();
        out[row] = (rhs[row] - tail) / m[row][row];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

const STEP_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 500;

/// Levenberg-damped Gauss-Newton from one starting point.
fn damped_gauss_newton(start: [f64; 4], x: &[f64], y: &[f64]) -> (SigmoidFit, f64) {
    let mut p = start;
    let mut current = sse(p, x, y);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let [a, b, c, d] = p;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let s = 1.0 / (1.0 + (-d * (xi - c)).exp());
            let ds = s * (1.0 - s);
            let grad = [1.0 - s, s, -(b - a) * ds * d, (b - a) * ds * (xi - c)];
            let resid = yi - sigmoid_curve(p, xi);
            for r in 0..4 {
                jtr[r] += grad[r] * resid;
                for k in 0..4 {
                    jtj[r][k] += grad[r] * grad[k];
                }
            }
        }
        let mut damped = jtj;
        for (k, row) in damped.iter_mut().enumerate() {
            row[k] += lambda * jtj[k][k].max(1e-12);
        }
        let Some(step) = solve4(damped, jtr) else {
            lambda *= 10.0;
            if lambda > 1e20 {
                break;
            }
            continue;
        };
        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
        let trial_sse = sse(trial, x, y);
        if trial_sse.is_finite() && trial_sse <= current {
            p = trial;
            current = trial_sse;
            lambda = (lambda / 10.0).max(1e-15);
        } else {
            lambda *= 10.0;
        }
        if norm < STEP_TOLERANCE {
            converged = true;
            break;
        }
        if lambda > 1e20 {
            break;
        }
    }
    let mut fit = SigmoidFit {
        a: p[0],
        b: p[1],
        c: p[2],
        d: p[3],
        residual_sse: current,
        converged,
        degenerate: false,
        iterations,
    };
    if fit.d < 0.0 {
        std::mem::swap(&mut fit.a, &mut fit.b);
        fit.d = -fit.d;
    }
    (fit, current)
}

/// Least-squares logistic fit of per-layer r values.
pub fn sigmoid_fit(layers: &[f64], r_values: &[f64]) -> Result<SigmoidFit, AttentionError> {
    if layers.len() != r_values.len() {
        return Err(AttentionError::Shape(format!(
            "{} layers for {} r values",
            layers.len(),
            r_values.len()
        )));
    }
    if layers.len() < 5 {
        return Err(AttentionError::TooFewPoints {
            needed: 5,
            got: layers.len(),
        });
    }
    if layers.iter().chain(r_values).any(|v| !v.is_finite()) {
        return Err(AttentionError::Shape("non-finite input".into()));
    }
    let n = layers.len();
    let lo = layers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = layers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = stats::mean(r_values).unwrap_or(0.0);
    let spread = r_values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean.abs().max(1.0) {
        return Ok(SigmoidFit {
            a: mean,
            b: mean,
            c: 0.5 * (lo + hi),
            d: 0.0,
            residual_sse: sse([mean, mean, 0.5 * (lo + hi), 0.0], layers, r_values),
            converged: true,
            degenerate: true,
            iterations: 0,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| layers[i].total_cmp(&layers[j]));
    let k = (n / 5).max(1);
    let head = stats::mean(&order[..k].iter().map(|&i| r_values[i]).collect::<Vec<_>>()).unwrap_or(mean);
    let tail = stats::mean(&order[n - k..].iter().map(|&i| r_values[i]).collect::<Vec<_>>()).unwrap_or(mean);
    let span = (hi - lo).max(1.0);

    let mut best: Option<SigmoidFit> = None;
    for frac in [0.25, 0.5, 0.75] {
        for slope in [0.5, 2.0, 8.0] {
            let start = [head, tail, lo + frac * (hi - lo), slope * 4.0 / span];
            let (fit, score) = damped_gauss_newton(start, layers, r_values);
            let better = match &best {
                None => true,
                Some(b) => score < b.residual_sse || (score == b.residual_sse && fit.converged && !b.converged),
            };
            if better {
                best = Some(fit);
            }
        }
    }
    let mut fit = best.expect("at least one start");
    fit.degenerate = (fit.b - fit.a).abs() < 1e-8 || fit.d < 1e-8;
    if !fit.converged {
        log::warn!("sigmoid fit did not converge; returning best iterate (sse {})", fit.residual_sse);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::{NormEntry, NormsTable, Scale, WordSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use serde_json::json;

    #[test]
    fn entropy_reference_rows() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.25; 4]).unwrap() - 1.386294).abs() < 1e-6);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        // Direct summation: -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2.
        let oracle = -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln());
        let got = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn entropy_errors_and_renormalization() {
        assert!(matches!(entropy(&[0.5, -0.1, 0.6]), Err(AttentionError::NegativeEntry(_))));
        assert!(matches!(entropy(&[0.0, 0.0]), Err(AttentionError::ZeroSum)));
        assert!(matches!(entropy(&[]), Err(AttentionError::ZeroSum)));
        let a = entropy(&[1.0, 1.0]).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&[0.5, -1e-12, 0.5]).is_ok());
    }

    fn two_head_tensor() -> AttentionTensor {
        // Head 0: token 0 uniform over 2 keys, token 1 one-hot.
        // Head 1: the reverse.
        AttentionTensor::new(
            0,
            2,
            2,
            vec![0.5, 0.5, 0.0, 1.0, 1.0, 0.0, 0.5, 0.5],
            false,
        )
        .unwrap()
    }

    #[test]
    fn head_average_is_mean_over_heads() {
        let h = head_average_entropy(&two_head_tensor()).unwrap();
        let ln2 = 2f64.ln();
        assert!((h[0] - 0.5 * ln2).abs() < 1e-15);
        assert!((h[1] - 0.5 * ln2).abs() < 1e-15);
        let single = AttentionTensor::new(0, 1, 2, vec![0.5, 0.5, 0.0, 1.0], false).unwrap();
        assert_eq!(head_average_entropy(&single).unwrap(), vec![2f64.ln(), 0.0]);
    }

    fn random_causal(heads: usize, tokens: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut data = vec![0.0; heads * tokens * tokens];
        for h in 0..heads {
            for i in 0..tokens {
                let logits: Vec<f64> = (0..=i).map(|_| rng.random_range(-3.0..3.0)).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    data[(h * tokens + i) * tokens + j] = (l - m).exp() / z;
                }
            }
        }
        data
    }

    #[test]
    fn causal_fixture_matches_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(46);
        let data = random_causal(4, 6, &mut rng);
        let t = AttentionTensor::new(2, 4, 6, data.clone(), true).unwrap();
        let got = head_average_entropy(&t).unwrap();
        for i in 0..6 {
            let mut total = 0.0;
            for h in 0..4 {
                let mut e = 0.0;
                for j in 0..=i {
                    let p = data[(h * 6 + i) * 6 + j];
                    if p > 0.0 {
                        e -= p * p.ln();
                    }
                }
                total += e;
            }
            assert!((got[i] - total / 4.0).abs() < 1e-12);
            assert!(got[i] <= ((i + 1) as f64).ln() + 1e-12);
        }
        let norm = head_average_entropy_normalized(&t).unwrap();
        assert_eq!(norm[0], 0.0);
        assert!((norm[3] - got[3] / 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tensor_validation() {
        assert!(matches!(
            AttentionTensor::new(0, 1, 2, vec![0.5, 0.5, 0.5, 0.5], true),
            Err(AttentionError::NotCausal { .. })
        ));
        assert!(matches!(
            AttentionTensor::new(0, 1, 2, vec![0.5, 0.4, 0.5, 0.5], false),
            Err(AttentionError::RowSum { .. })
        ));
        assert!(AttentionTensor::new(0, 1, 2, vec![0.5; 3], false).is_err());
    }

    fn sheet(seq: &str, values: Vec<f64>, conc: Vec<f64>, layers: usize) -> EntropySheet {
        let words = (0..conc.len()).map(|i| format!("t{i}")).collect();
        EntropySheet::new(seq, layers, values, words, conc).unwrap()
    }

    #[test]
    fn exact_negative_line_and_constant_layer() {
        let conc: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 * 0.3).collect();
        let mut values: Vec<f64> = conc.iter().map(|c| 2.4 - 0.4 * c).collect();
        values.extend(std::iter::repeat_n(1.0, 12));
        let s = sheet("q", values, conc, 2);
        let out = layer_correlations(&[s], &CorrelationOptions::default()).unwrap();
        assert!((out[0].r.unwrap() + 1.0).abs() < 1e-12);
        assert!(out[0].p.unwrap() < 1e-10);
        assert_eq!(out[1].r, None);
        assert_eq!(out[1].n, 12);
        assert_eq!(mean_layer_r(&out).unwrap(), out[0].r.unwrap());
    }

    #[test]
    fn zero_scored_tokens_are_excluded_by_default() {
        let conc = vec![0.0, 2.0, 3.0, 4.0, 0.0];
        let values = vec![1.5, 1.0, 0.8, 0.2, 0.0];
        let s = sheet("q", values, conc, 1);
        let opts = CorrelationOptions { min_n: 3, ..Default::default() };
        assert_eq!(layer_correlations(std::slice::from_ref(&s), &opts).unwrap()[0].n, 3);
        let opts = CorrelationOptions { min_n: 3, include_zero_scored: true, ..Default::default() };
        assert_eq!(layer_correlations(&[s], &opts).unwrap()[0].n, 5);
    }

    #[test]
    fn fifty_token_layer_matches_formula_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let conc: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..5.0)).collect();
        let values: Vec<f64> = conc.iter().map(|c| (2.0 - 0.2 * c + rng.random_range(-0.5..0.5)).max(0.0)).collect();
        let s = sheet("q", values.clone(), conc.clone(), 1);
        let got = layer_correlations(&[s], &CorrelationOptions::default()).unwrap()[0];
        let n = 50.0;
        let (sx, sy): (f64, f64) = (conc.iter().sum(), values.iter().sum());
        let sxy: f64 = conc.iter().zip(&values).map(|(a, b)| a * b).sum();
        let sxx: f64 = conc.iter().map(|a| a * a).sum();
        let syy: f64 = values.iter().map(|b| b * b).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let p = 2.0 * StudentsT::new(0.0, 1.0, n - 2.0).unwrap().sf(t.abs());
        assert!((got.r.unwrap() - r).abs() < 1e-10);
        assert!((got.p.unwrap() - p).abs() < 1e-6);
    }

    #[test]
    fn per_question_averages_sequence_rs() {
        let a = sheet("a", vec![0.9, 0.6, 0.3], vec![1.0, 2.0, 3.0], 1);
        let b = sheet("b", vec![0.3, 0.6, 1.05], vec![1.0, 2.0, 3.0], 1);
        let opts = CorrelationOptions { min_n: 3, per_question: true, ..Default::default() };
        let out = layer_correlations(&[a, b], &opts).unwrap();
        let rb = stats::pearson(&[1.0, 2.0, 3.0], &[0.3, 0.6, 1.05]).unwrap().r;
        assert!((out[0].r.unwrap() - (rb - 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(out[0].p, None);
        assert_eq!(out[0].n, 6);
    }

    #[test]
    fn mean_r_cases() {
        let lc = |layer, r| LayerCorrelation { layer, r, p: None, n: 10 };
        let out = [lc(0, Some(-0.2)), lc(1, Some(-0.1)), lc(2, Some(0.0)), lc(3, None)];
        assert!((mean_layer_r(&out).unwrap() + 0.1).abs() < 1e-15);
        assert_eq!(mean_layer_r(&out[1..2]).unwrap(), -0.1);
        assert!(matches!(mean_layer_r(&out[3..]), Err(AttentionError::NoDefinedLayers)));
        // Shaped like the per-layer tables of a 32-layer model.
        let rs: Vec<f64> = (0..32).map(|l| -0.02 - 0.2 / (1.0 + (-(l as f64 - 16.0) * 0.4).exp())).collect();
        let layers: Vec<LayerCorrelation> = rs.iter().enumerate().map(|(l, &r)| lc(l, Some(r))).collect();
        let oracle = rs.iter().sum::<f64>() / 32.0;
        assert!((mean_layer_r(&layers).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_recovers_generating_parameters() {
        let truth = [-0.3, 0.0, 16.0, 0.5];
        let layers: Vec<f64> = (0..32).map(f64::from).collect();
        let r: Vec<f64> = layers.iter().map(|&l| sigmoid_curve(truth, l)).collect();
        let fit = sigmoid_fit(&layers, &r).unwrap();
        assert!(fit.converged);
        assert!(!fit.degenerate);
        for (got, want) in [fit.a, fit.b, fit.c, fit.d].iter().zip(truth) {
            assert!((got - want).abs() < 1e-4, "{fit:?}");
        }
        assert!(fit.residual_sse < 1e-12);
    }

    #[test]
    fn sigmoid_flat_and_short_inputs() {
        let layers: Vec<f64> = (0..10).map(f64::from).collect();
        let fit = sigmoid_fit(&layers, &[-0.1; 10]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.d, 0.0);
        assert!(fit.residual_sse < 1e-24);
        assert!(matches!(
            sigmoid_fit(&layers[..4], &[0.1, 0.2, 0.3, 0.4]),
            Err(AttentionError::TooFewPoints { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn sigmoid_noisy_data_fits_close_curve() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let truth = [0.05, -0.25, 10.0, 0.8];
        let layers: Vec<f64> = (0..24).map(f64::from).collect();
        let r: Vec<f64> = layers.iter().map(|&l| sigmoid_curve(truth, l) + rng.random_range(-0.01..0.01)).collect();
        let fit = sigmoid_fit(&layers, &r).unwrap();
        assert!((fit.c - 10.0).abs() < 1.0, "{fit:?}");
        assert!(fit.residual_sse < 24.0 * 1e-4);
    }

    #[test]
    fn collects_sheets_from_raw_and_precomputed_containers() {
        let norms = NormsTable::from_entries(
            [("apple", NormEntry { mean: 4.8, sd: 0.4, n_raters: None }), ("idea", NormEntry { mean: 1.5, sd: 0.9, n_raters: None })],
            Scale::default(),
        )
        .unwrap();
        let stop = WordSet::default_function_words();
        let scorer = Scorer::new(&norms, &stop);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let words = vec!["the".to_string(), "apple".into(), "apple".into(), "idea".into()];
        let word_index = vec![0, 1, 1, 2];
        let mut containers = Vec::new();
        let mut layers = Vec::new();
        for layer in 0..2u64 {
            let data = random_causal(2, 4, &mut rng);
            let mut meta = serde_json::Map::new();
            meta.insert("model_id".into(), json!("m"));
            meta.insert("sequence".into(), json!("s1"));
            meta.insert("layer".into(), json!(layer));
            meta.insert("causal".into(), json!(true));
            meta.insert("words".into(), json!(words));
            meta.insert("word_index".into(), json!(word_index));
            let t = Tensor::new(vec![2, 4, 4], data.iter().map(|&v| v as f32).collect(), meta).unwrap();
            layers.push(AttentionTensor::from_tensor(&t).unwrap());
            containers.push(t);
        }
        containers.reverse();
        let sheets = collect_sheets(&containers, &scorer, EntropyMode::Raw).unwrap();
        let s = &sheets["m"][0];
        assert_eq!(s.token_concreteness, vec![0.0, 4.8, 4.8, 1.5]);
        assert_eq!(s.layers, 2);
        let direct = EntropySheet::from_layers("s1", &layers, words.clone(), s.token_concreteness.clone(), EntropyMode::Raw).unwrap();
        assert_eq!(s, &direct);

        // The same numbers shipped as a precomputed sheet.
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), json!("entropy_sheet"));
        meta.insert("model_id".into(), json!("m2"));
        meta.insert("sequence".into(), json!("s1"));
        meta.insert("words".into(), json!(words));
        meta.insert("word_index".into(), json!(word_index));
        let t = Tensor::new(vec![2, 4], direct.values.iter().map(|&v| v as f32).collect(), meta).unwrap();
        let sheets = collect_sheets(&[t], &scorer, EntropyMode::Raw).unwrap();
        let pre = &sheets["m2"][0];
        assert_eq!(pre.token_concreteness, direct.token_concreteness);
        for (a, b) in pre.values.iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_permutation_invariant(
            w in proptest::collection::vec(0.0f64..1.0, 1..40), rot in 0usize..40
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let h = entropy(&w).unwrap();
            let support = w.iter().filter(|&&v| v > 0.0).count() as f64;
            prop_assert!(h >= 0.0 && h <= support.ln() + 1e-12);
            let mut rotated = w.clone();
            rotated.rotate_left(rot % w.len());
            prop_assert!((h - entropy(&rotated).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariance(a in 0.01f64..100.0, b in -50.0f64..50.0, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..5.0)).collect();
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..3.0)).collect();
            let r = stats::pearson(&x, &y).unwrap().r;
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((stats::pearson(&xt, &y).unwrap().r - r).abs() < 1e-12);
        }

        #[test]
        fn head_average_commutes_with_token_subsetting(seed in 0u64..500, keep in 1usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let full = AttentionTensor::new(0, 3, 8, random_causal(3, 8, &mut rng), true).unwrap();
            let all = head_average_entropy(&full).unwrap();
            // Causal rows i < keep only see keys < keep, so the prefix block is a valid tensor.
            let mut data = Vec::new();
            for h in 0..3 {
                for i in 0..keep {
                    data.extend_from_slice(&full.row(h, i)[..keep]);
                }
            }
            let sub = AttentionTensor::new(0, 3, keep, data, true).unwrap();
            prop_assert_eq!(head_average_entropy(&sub).unwrap(), all[..keep].to_vec());
        }
    }
}
