//! Concreteness-binned QA accuracy and the vision-minus-baseline gap.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norms::{NormsError, Scorer, SentencePolicy};
use crate::stats::{self, StatsError};

/// Slack used when checking span divisibility and when snapping values that
/// sit on a bin edge into the bin that starts there.
const EDGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("invalid bin spec: {0}")]
    InvalidBins(String),
    #[error("no QA records")]
    EmptyRecords,
    #[error("records mix model ids {0:?} and {1:?}")]
    MixedModels(String, String),
    #[error("record {0:?} has no sentence concreteness (supply norms)")]
    MissingConcreteness(String),
    #[error("bin grids differ")]
    GridMismatch,
    #[error("need at least {needed} occupied bins, got {got}")]
    TooFewBins { needed: usize, got: usize },
    #[error("QA line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate QA record {0}")]
    Duplicate(String),
    #[error(transparent)]
    Norms(#[from] NormsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Equal-width bins over `[lo, hi]`; bin k is `[lo + k*width, lo + (k+1)*width)`
/// and the final bin is closed on the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
    n_bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, width: f64) -> Result<Self, BehaviorError> {
        if !(lo.is_finite() && hi.is_finite() && width.is_finite()) {
            return Err(BehaviorError::InvalidBins("non-finite bound".into()));
        }
        if lo >= hi {
            return Err(BehaviorError::InvalidBins(format!("lo {lo} must be < hi {hi}")));
        }
        if width <= 0.0 {
            return Err(BehaviorError::InvalidBins(format!("width {width} must be > 0")));
        }
        let ratio = (hi - lo) / width;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > EDGE_TOLERANCE * n.max(1.0) {
            return Err(BehaviorError::InvalidBins(format!(
                "span {} is not a multiple of width {width}",
                hi - lo
            )));
        }
        Ok(Self {
            lo,
            hi,
            width,
            n_bins: n as usize,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|k| self.center(k)).collect()
    }

    /// Bin holding `x`, or `None` when `x` lies outside `[lo, hi]`.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        if !x.is_finite() || x < self.lo - EDGE_TOLERANCE * self.width || x > self.hi + EDGE_TOLERANCE * self.width {
            return None;
        }
        let k = ((x - self.lo) / self.width + EDGE_TOLERANCE).floor();
        Some((k.max(0.0) as usize).min(self.n_bins - 1))
    }
}

impl FromStr for BinSpec {
    type Err = BehaviorError;

    /// `LO:HI:WIDTH`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || BehaviorError::InvalidBins(format!("{s:?} is not LO:HI:WIDTH"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        BinSpec::new(nums[0], nums[1], nums[2])
    }
}

impl fmt::Display for BinSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.width)
    }
}

/// One benchmark question as answered by one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub model_id: String,
    pub dataset: String,
    pub question_id: String,
    pub question_text: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_concreteness: Option<f64>,
}

/// Reads JSON-lines QA records, rejecting duplicate `(model, dataset, question)` keys.
pub fn read_qa_jsonl<R: BufRead>(reader: R) -> Result<Vec<QARecord>, BehaviorError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QARecord = serde_json::from_str(&line).map_err(|e| BehaviorError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let key = (
            record.model_id.clone(),
            record.dataset.clone(),
            record.question_id.clone(),
        );
        if !seen.insert(key) {
            return Err(BehaviorError::Duplicate(format!(
                "{}/{}/{}",
                record.model_id, record.dataset, record.question_id
            )));
        }
        out.push(record);
    }
    Ok(out)
}

/// Fills `sentence_concreteness` from the question text.
pub fn score_records(
    records: &mut [QARecord],
    scorer: &Scorer<'_>,
    policy: SentencePolicy,
) -> Result<(), BehaviorError> {
    for r in records {
        r.sentence_concreteness = Some(scorer.score_text(&r.question_text, policy)?);
    }
    Ok(())
}

/// Per-bin values aligned to bin centers; `None` marks an empty bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedSeries {
    pub bin_centers: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl BinnedSeries {
    pub fn occupied(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.bin_centers
            .iter()
            .zip(&self.values)
            .filter_map(|(&c, v)| v.map(|v| (c, v)))
    }
}

/// Raw per-bin tallies for one model; mergeable across partitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyBins {
    pub model_id: String,
    pub spec: BinSpec,
    pub correct: Vec<usize>,
    pub counts: Vec<usize>,
    pub out_of_range: usize,
}

impl AccuracyBins {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.out_of_range
    }

    pub fn series(&self) -> BinnedSeries {
        BinnedSeries {
            bin_centers: self.spec.centers(),
            values: self
                .correct
                .iter()
                .zip(&self.counts)
                .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
                .collect(),
            counts: self.counts.clone(),
        }
    }

    /// Count-weighted merge of two binnings of the same model and grid.
    pub fn merge(&self, other: &AccuracyBins) -> Result<AccuracyBins, BehaviorError> {
        if self.spec != other.spec {
            return Err(BehaviorError::GridMismatch);
        }
        if self.model_id != other.model_id {
            return Err(BehaviorError::MixedModels(
                self.model_id.clone(),
                other.model_id.clone(),
            ));
        }
        let add = |a: &[usize], b: &[usize]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(AccuracyBins {
            model_id: self.model_id.clone(),
            spec: self.spec,
            correct: add(&self.correct, &other.correct),
            counts: add(&self.counts, &other.counts),
            out_of_range: self.out_of_range + other.out_of_range,
        })
    }
}

/// Bins one model's records by sentence concreteness.
pub fn bin_accuracy(records: &[QARecord], bins: &BinSpec) -> Result<AccuracyBins, BehaviorError> {
    let first = records.first().ok_or(BehaviorError::EmptyRecords)?;
    let n = bins.n_bins();
    let mut out = AccuracyBins {
        model_id: first.model_id.clone(),
        spec: *bins,
        correct: vec![0; n],
        counts: vec![0; n],
        out_of_range: 0,
    };
    for r in records {
        if r.model_id != first.model_id {
            return Err(BehaviorError::MixedModels(
                first.model_id.clone(),
                r.model_id.clone(),
            ));
        }
        let c = r
            .sentence_concreteness
            .ok_or_else(|| BehaviorError::MissingConcreteness(r.question_id.clone()))?;
        match bins.index_of(c) {
            Some(k) => {
                out.counts[k] += 1;
                out.correct[k] += usize::from(r.correct);
            }
            None => out.out_of_range += 1,
        }
    }
    if out.out_of_range > 0 {
        log::warn!(
            "{}: {} records outside [{}, {}]",
            out.model_id,
            out.out_of_range,
            bins.lo,
            bins.hi
        );
    }
    Ok(out)
}

/// Separate binning per dataset.
pub fn bin_accuracy_by_dataset(
    records: &[QARecord],
    bins: &BinSpec,
) -> Result<BTreeMap<String, AccuracyBins>, BehaviorError> {
    let mut groups: BTreeMap<String, Vec<QARecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.dataset.clone()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(ds, recs)| Ok((ds, bin_accuracy(&recs, bins)?)))
        .collect()
}

/// Pooled accuracy over all records (out-of-range included).
pub fn overall_accuracy(records: &[QARecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Bin-wise `vision - baseline`; a bin empty in either input stays undefined.
pub fn accuracy_gap(vlm: &BinnedSeries, llm: &BinnedSeries) -> Result<BinnedSeries, BehaviorError> {
    if vlm.bin_centers.len() != llm.bin_centers.len()
        || vlm
            .bin_centers
            .iter()
            .zip(&llm.bin_centers)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(BehaviorError::GridMismatch);
    }
    Ok(BinnedSeries {
        bin_centers: vlm.bin_centers.clone(),
        values: vlm
            .values
            .iter()
            .zip(&llm.values)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
            .collect(),
        counts: vlm
            .counts
            .iter()
            .zip(&llm.counts)
            .map(|(&a, &b)| a.min(b))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapTrend {
    pub spearman_rho: f64,
    pub n_bins: usize,
}

/// Spearman correlation between bin centers and gap values over occupied bins.
pub fn gap_trend(gaps: &BinnedSeries) -> Result<GapTrend, BehaviorError> {
    let (centers, values): (Vec<f64>, Vec<f64>) = gaps.occupied().unzip();
    if centers.len() < 3 {
        return Err(BehaviorError::TooFewBins {
            needed: 3,
            got: centers.len(),
        });
    }
    Ok(GapTrend {
        spearman_rho: stats::spearman(&centers, &values)?,
        n_bins: centers.len(),
    })
}
