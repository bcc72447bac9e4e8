//! Human-model rating alignment: per-word rating distributions, symmetric KL
//! divergence and a regression of binned divergence on human concreteness.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BinSpec, BinnedSeries, BehaviorError};
use crate::norms::{normalize_word, NormEntry, NormsTable};
use crate::stats::{self, CompensatedSum, OlsResult, StatsError};

const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid rating grid: {0}")]
    InvalidGrid(String),
    #[error("supports differ")]
    SupportMismatch,
    #[error("distribution has a zero cell at {0}; smoothing is required")]
    ZeroCell(f64),
    #[error("{got} ratings, need at least {needed}")]
    TooFewContexts { needed: usize, got: usize },
    #[error("rating {0} is outside the grid")]
    OutOfRange(f64),
    #[error("standard deviation {0} is negative or not finite")]
    InvalidSd(f64),
    #[error("epsilon {0} must be finite and non-negative")]
    InvalidEpsilon(f64),
    #[error("ratings mix models {0:?} and {1:?}")]
    MixedModels(String, String),
    #[error("no rating records")]
    Empty,
    #[error("need at least {needed} occupied bins, got {got}")]
    TooFewBins { needed: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Bins(#[from] BehaviorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Evenly spaced rating values `min, min + step, ..., max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatingGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    #[serde(skip)]
    points: Vec<f64>,
}

impl RatingGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self, AlignmentError> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || max <= min {
            return Err(AlignmentError::InvalidGrid(format!("{min}:{max}:{step}")));
        }
        let ratio = (max - min) / step;
        let cells = ratio.round();
        if (ratio - cells).abs() > GRID_TOLERANCE * cells.max(1.0) || cells > 1e6 {
            return Err(AlignmentError::InvalidGrid(format!(
                "span {} is not a whole number of {step} steps",
                max - min
            )));
        }
        let points = (0..=cells as usize).map(|k| min + k as f64 * step).collect();
        Ok(Self { min, max, step, points })
    }

    /// 1..5 in steps of 0.1.
    pub fn default_for(min: f64, max: f64) -> Result<Self, AlignmentError> {
        Self::new(min, max, 0.1)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, rating: f64) -> bool {
        let slack = GRID_TOLERANCE * self.step;
        rating.is_finite() && rating >= self.min - slack && rating <= self.max + slack
    }

    /// Index of the nearest grid point; ties go to the upper point.
    pub fn snap(&self, rating: f64) -> Option<usize> {
        if !self.contains(rating) {
            return None;
        }
        let k = ((rating - self.min) / self.step + 0.5 + GRID_TOLERANCE).floor();
        Some((k.max(0.0) as usize).min(self.points.len() - 1))
    }
}

impl FromStr for RatingGrid {
    type Err = AlignmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, step] = parts[..] else {
            return Err(AlignmentError::InvalidGrid(format!("{s:?} is not MIN:MAX:STEP")));
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| AlignmentError::InvalidGrid(format!("{v:?} is not a number")))
        };
        Self::new(num(lo)?, num(hi)?, num(step)?)
    }
}

impl fmt::Display for RatingGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.min, self.max, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub model_id: String,
    pub context_id: String,
    pub word: String,
    pub rating: f64,
}

pub fn read_ratings_jsonl<R: BufRead>(reader: R) -> Result<Vec<RatingRecord>, AlignmentError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord = serde_json::from_str(&line).map_err(|e| AlignmentError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !rec.rating.is_finite() {
            return Err(AlignmentError::Parse {
                line: i + 1,
                message: format!("rating {} is not finite", rec.rating),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatingDistribution {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `(p + eps) / (1 + K eps)` cell-wise.
fn smooth(mut probs: Vec<f64>, epsilon: f64) -> Vec<f64> {
    let k = probs.len() as f64;
    let z = 1.0 + k * epsilon;
    for p in &mut probs {
        *p = (*p + epsilon) / z;
    }
    probs
}

fn check_epsilon(epsilon: f64) -> Result<(), AlignmentError> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(AlignmentError::InvalidEpsilon(epsilon))
    }
}

/// Empirical distribution of one word's ratings over the grid.
pub fn model_distribution(
    ratings: &[f64],
    grid: &RatingGrid,
    epsilon: f64,
    min_contexts: usize,
) -> Result<RatingDistribution, AlignmentError> {
    check_epsilon(epsilon)?;
    if ratings.len() < min_contexts.max(1) {
        return Err(AlignmentError::TooFewContexts {
            needed: min_contexts.max(1),
            got: ratings.len(),
        });
    }
    let mut counts = vec![0usize; grid.len()];
    for &r in ratings {
        counts[grid.snap(r).ok_or(AlignmentError::OutOfRange(r))?] += 1;
    }
    let n = ratings.len() as f64;
    let probs = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(RatingDistribution {
        support: grid.points().to_vec(),
        probs: smooth(probs, epsilon),
    })
}

/// Discretized `N(mean, sd^2)`: cell edges at midpoints, outer cells absorb
/// the tails.
pub fn human_distribution(
    entry: &NormEntry,
    grid: &RatingGrid,
    epsilon: f64,
) -> Result<RatingDistribution, AlignmentError> {
    check_epsilon(epsilon)?;
    if !(entry.sd.is_finite() && entry.sd >= 0.0) {
        return Err(AlignmentError::InvalidSd(entry.sd));
    }
    let k = grid.len();
    let mut probs = vec![0.0; k];
    if entry.sd == 0.0 {
        let clamped = entry.mean.clamp(grid.min, grid.max);
        probs[grid.snap(clamped).unwrap_or(0)] = 1.0;
    } else {
        let cdf = |x: f64| stats::normal_cdf((x - entry.mean) / entry.sd);
        let points = grid.points();
        let mut lower = 0.0;
        for i in 0..k {
            let upper = if i + 1 < k {
                cdf(0.5 * (points[i] + points[i + 1]))
            } else {
                1.0
            };
            probs[i] = (upper - lower).max(0.0);
            lower = upper;
        }
        let total: f64 = probs.iter().collect::<CompensatedSum>().total();
        for p in &mut probs {
            *p /= total;
        }
    }
    Ok(RatingDistribution {
        support: grid.points().to_vec(),
        probs: smooth(probs, epsilon),
    })
}

/// `0.5 * (KL(p||q) + KL(q||p))` in nats.
pub fn sym_kl(p: &RatingDistribution, q: &RatingDistribution) -> Result<f64, AlignmentError> {
    if p.support.len() != q.support.len()
        || p.probs.len() != p.support.len()
        || q.probs.len() != q.support.len()
        || p.support.iter().zip(&q.support).any(|(a, b)| (a - b).abs() > GRID_TOLERANCE)
    {
        return Err(AlignmentError::SupportMismatch);
    }
    let mut acc = CompensatedSum::new();
    for ((&a, &b), &x) in p.probs.iter().zip(&q.probs).zip(&p.support) {
        if a <= 0.0 || b <= 0.0 {
            if a == 0.0 && b == 0.0 {
                continue;
            }
            return Err(AlignmentError::ZeroCell(x));
        }
        // a ln(a/b) + b ln(b/a) = (a - b) ln(a/b); symmetric in (a, b) bit for bit.
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        acc.add((hi - lo) * (hi / lo).ln());
    }
    Ok(0.5 * acc.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WordDivergence {
    pub human_mean: f64,
    pub d_kl: f64,
    pub n_contexts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AlignmentSkips {
    /// Words not in the norms.
    pub uncovered: usize,
    /// Words with fewer than `min_contexts` ratings.
    pub too_few_contexts: usize,
    /// Ratings outside the grid, dropped before counting.
    pub out_of_range: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentOptions {
    pub grid: RatingGrid,
    pub epsilon: f64,
    pub min_contexts: usize,
    pub bin_width: f64,
}

impl AlignmentOptions {
    pub fn for_scale(min: f64, max: f64) -> Result<Self, AlignmentError> {
        Ok(Self {
            grid: RatingGrid::default_for(min, max)?,
            epsilon: 1e-6,
            min_contexts: 3,
            bin_width: 0.5,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    pub model_id: String,
    pub per_word: BTreeMap<String, WordDivergence>,
    pub binned: BinnedSeries,
    pub fit: OlsResult,
    pub skipped: AlignmentSkips,
}

/// Mean divergence per bin of human concreteness, then OLS of the bin means on
/// the bin centers. Bins tile the norms scale.
pub fn binned_divergence_regression(
    per_word: &BTreeMap<String, WordDivergence>,
    lo: f64,
    hi: f64,
    bin_width: f64,
) -> Result<(BinnedSeries, OlsResult), AlignmentError> {
    let spec = BinSpec::new(lo, hi, bin_width)?;
    let mut sums = vec![CompensatedSum::new(); spec.n_bins()];
    let mut counts = vec![0usize; spec.n_bins()];
    for w in per_word.values() {
        if let Some(k) = spec.index_of(w.human_mean) {
            sums[k].add(w.d_kl);
            counts[k] += 1;
        }
    }
    let binned = BinnedSeries {
        bin_centers: spec.centers(),
        values: sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| (n > 0).then(|| s.total() / n as f64))
            .collect(),
        counts,
    };
    let (x, y): (Vec<f64>, Vec<f64>) = binned.occupied().unzip();
    if x.len() < 3 {
        return Err(AlignmentError::TooFewBins { needed: 3, got: x.len() });
    }
    let fit = stats::ols(&x, &y)?;
    Ok((binned, fit))
}

/// Full alignment analysis for one model's ratings.
pub fn align(
    records: &[RatingRecord],
    norms: &NormsTable,
    options: &AlignmentOptions,
) -> Result<AlignmentResult, AlignmentError> {
    let first = records.first().ok_or(AlignmentError::Empty)?;
    if let Some(other) = records.iter().find(|r| r.model_id != first.model_id) {
        return Err(AlignmentError::MixedModels(first.model_id.clone(), other.model_id.clone()));
    }
    let mut skipped = AlignmentSkips::default();
    let mut by_word: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if !options.grid.contains(r.rating) {
            skipped.out_of_range += 1;
            continue;
        }
        by_word.entry(normalize_word(&r.word)).or_default().push(r.rating);
    }
    if skipped.out_of_range > 0 {
        log::warn!("{}: {} ratings outside grid {} dropped", first.model_id, skipped.out_of_range, options.grid);
    }
    let mut work = Vec::new();
    for (word, ratings) in by_word {
        match norms.get(&word) {
            None => skipped.uncovered += 1,
            Some(_) if ratings.len() < options.min_contexts => skipped.too_few_contexts += 1,
            Some(entry) => work.push((word, ratings, entry)),
        }
    }
    let per_word = work
        .into_par_iter()
        .map(|(word, ratings, entry)| {
            let model = model_distribution(&ratings, &options.grid, options.epsilon, options.min_contexts)?;
            let human = human_distribution(entry, &options.grid, options.epsilon)?;
            let d_kl = sym_kl(&model, &human)?;
            Ok((
                word,
                WordDivergence {
                    human_mean: entry.mean,
                    d_kl,
                    n_contexts: ratings.len(),
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>, AlignmentError>>()?;
    let scale = norms.scale();
    let (binned, fit) = binned_divergence_regression(&per_word, scale.min, scale.max, options.bin_width)?;
    Ok(AlignmentResult {
        model_id: first.model_id.clone(),
        per_word,
        binned,
        fit,
        skipped,
    })
}
