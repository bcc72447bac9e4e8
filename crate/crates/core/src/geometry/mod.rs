//! Type-vector geometry: per-word mean embeddings, a 2-D t-SNE projection and
//! within-concreteness-bin dispersion.

mod dispersion;
mod tsne;

use std::collections::HashMap;

use serde::Serialize;
use serde_json::{json, Map};
use thiserror::Error;

use crate::norms::NormsTable;
use crate::stats::CompensatedSum;
use crate::tensor::{Tensor, TensorError};

pub use dispersion::{dispersion, BinDispersion, DispersionOptions, DispersionReport, DistanceMetric};
pub use tsne::{affinities, tsne_embed, Affinities, TsneParams, TsneRun};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("no embedding occurrences")]
    Empty,
    #[error("vector dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding for {0:?}")]
    NonFinite(String),
    #[error("duplicate word {0:?} in embedding matrix")]
    DuplicateWord(String),
    #[error("need at least {needed} points, got {n}")]
    TooFewPoints { n: usize, needed: usize },
    #[error("perplexity {perplexity} is not usable with {n} points ({reason})")]
    InvalidPerplexity {
        perplexity: f64,
        n: usize,
        reason: &'static str,
    },
    #[error("invalid t-SNE parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("embedding container is missing {0}")]
    MissingMeta(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One row per word type; rows are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    words: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(words: Vec<String>, vectors: Vec<f64>, dim: usize) -> Result<Self, GeometryError> {
        if words.is_empty() {
            return Err(GeometryError::Empty);
        }
        if dim == 0 || vectors.len() != words.len() * dim {
            return Err(GeometryError::DimensionMismatch {
                expected: words.len() * dim,
                got: vectors.len(),
            });
        }
        let mut seen = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if seen.insert(w.as_str(), i).is_some() {
                return Err(GeometryError::DuplicateWord(w.clone()));
            }
            if vectors[i * dim..(i + 1) * dim].iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::NonFinite(w.clone()));
            }
        }
        Ok(Self {
            words,
            vectors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose word satisfies `keep`, in the original order.
    pub fn filter<F: Fn(&str) -> bool>(&self, keep: F) -> Option<EmbeddingMatrix> {
        let mut words = Vec::new();
        let mut vectors = Vec::new();
        for (i, w) in self.words.iter().enumerate() {
            if keep(w) {
                words.push(w.clone());
                vectors.extend_from_slice(self.row(i));
            }
        }
        (!words.is_empty()).then_some(EmbeddingMatrix {
            words,
            vectors,
            dim: self.dim,
        })
    }

    /// Reads a `[N, D]` container whose meta carries `"words"`.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self, GeometryError> {
        let [n, dim] = tensor.shape[..] else {
            return Err(GeometryError::DimensionMismatch {
                expected: 2,
                got: tensor.shape.len(),
            });
        };
        let words = tensor
            .meta_strings("words")
            .ok_or(GeometryError::MissingMeta("a \"words\" list"))?;
        if words.len() != n {
            return Err(GeometryError::DimensionMismatch {
                expected: n,
                got: words.len(),
            });
        }
        Self::new(words, tensor.data.iter().map(|&v| f64::from(v)).collect(), dim)
    }

    pub fn to_tensor(&self, model_id: &str) -> Tensor {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("embeddings"));
        meta.insert("model_id".into(), json!(model_id));
        meta.insert("words".into(), json!(self.words));
        Tensor {
            shape: vec![self.len(), self.dim],
            data: self.vectors.iter().map(|&v| v as f32).collect(),
            meta,
        }
    }
}

/// Averages occurrence vectors into one type vector per distinct word
/// (first-seen order).
pub fn type_vectors<I>(occurrences: I) -> Result<EmbeddingMatrix, GeometryError>
where
    I: IntoIterator<Item = (String, Vec<f64>)>,
{
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut words = Vec::new();
    let mut sums: Vec<Vec<CompensatedSum>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut dim = None;
    for (word, vector) in occurrences {
        let d = *dim.get_or_insert(vector.len());
        if vector.len() != d || d == 0 {
            return Err(GeometryError::DimensionMismatch {
                expected: d,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(word));
        }
        let slot = *index.entry(word.clone()).or_insert_with(|| {
            words.push(word);
            sums.push(vec![CompensatedSum::new(); d]);
            counts.push(0);
            words.len() - 1
        });
        for (acc, v) in sums[slot].iter_mut().zip(&vector) {
            acc.add(*v);
        }
        counts[slot] += 1;
    }
    let dim = dim.ok_or(GeometryError::Empty)?;
    let vectors = sums
        .iter()
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |s| s.total() / n as f64))
        .collect();
    EmbeddingMatrix::new(words, vectors, dim)
}

/// Rounds a norms mean half-up to an integer bin in 1..=5.
pub fn concreteness_bin(mean: f64) -> u8 {
    (mean + 0.5).floor().clamp(1.0, 5.0) as u8
}

/// 2-D coordinates with their integer concreteness labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanarEmbedding {
    pub words: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub concreteness_bin: Vec<u8>,
}

impl PlanarEmbedding {
    pub fn to_tensor(&self, model_id: &str) -> Tensor {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("planar"));
        meta.insert("model_id".into(), json!(model_id));
        meta.insert("words".into(), json!(self.words));
        meta.insert("concreteness_bin".into(), json!(self.concreteness_bin));
        Tensor {
            shape: vec![self.coords.len(), 2],
            data: self
                .coords
                .iter()
                .flat_map(|c| [c[0] as f32, c[1] as f32])
                .collect(),
            meta,
        }
    }
}

/// Output of [`analyze_embeddings`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryResult {
    pub planar: PlanarEmbedding,
    pub dispersion: DispersionReport,
    pub final_kl: f64,
    pub n_types: usize,
    /// Types dropped because the norms do not cover them.
    pub uncovered: usize,
}

/// Norms-covered types -> t-SNE -> per-bin dispersion.
pub fn analyze_embeddings(
    matrix: &EmbeddingMatrix,
    norms: &NormsTable,
    params: &TsneParams,
    options: &DispersionOptions,
) -> Result<GeometryResult, GeometryError> {
    let covered = matrix
        .filter(|w| norms.get(w).is_some())
        .ok_or(GeometryError::TooFewPoints { n: 0, needed: 4 })?;
    let uncovered = matrix.len() - covered.len();
    params.validate_for(covered.len())?;
    let bins: Vec<u8> = covered
        .words()
        .iter()
        .map(|w| concreteness_bin(norms.get(w).map_or(0.0, |e| e.mean)))
        .collect();
    let p = affinities(&covered, params.perplexity)?;
    let run = tsne_embed(&p, params)?;
    let planar = PlanarEmbedding {
        words: covered.words().to_vec(),
        coords: run.coords,
        concreteness_bin: bins,
    };
    let dispersion = dispersion(&planar, options);
    Ok(GeometryResult {
        dispersion,
        final_kl: run.kl_history.last().copied().unwrap_or(f64::NAN),
        n_types: planar.words.len(),
        planar,
        uncovered,
    })
}
