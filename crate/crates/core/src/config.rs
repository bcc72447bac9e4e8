//! Run configuration: a plain `key = value` file, overridable key by key and
//! echoed back in full into every report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::alignment::{AlignmentOptions, RatingGrid};
use crate::attention::{CorrelationOptions, EntropyMode};
use crate::behavior::BinSpec;
use crate::geometry::{DispersionOptions, DistanceMetric, TsneParams};
use crate::norms::{ColumnMap, Scale, SentencePolicy};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Every tunable of a full run. Field names match the config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub baseline_model: String,
    pub vision_model: String,
    pub norms: PathBuf,
    pub norms_columns: ColumnMap,
    pub norms_scale: Scale,
    pub function_words: Option<PathBuf>,
    pub named_entities: Option<PathBuf>,
    pub bins: BinSpec,
    pub sentence_policy: SentencePolicy,
    pub tsne: TsneParams,
    pub dispersion: DispersionOptions,
    pub entropy_mode: EntropyMode,
    pub correlation: CorrelationOptions,
    /// `None`: derived from the norms scale in steps of 0.1.
    pub grid: Option<RatingGrid>,
    pub epsilon: f64,
    pub min_contexts: usize,
    pub align_bin_width: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            baseline_model: "baseline".into(),
            vision_model: "vision".into(),
            norms: PathBuf::from("norms.csv"),
            norms_columns: ColumnMap::default(),
            norms_scale: Scale::default(),
            function_words: None,
            named_entities: None,
            bins: BinSpec::new(1.8, 4.8, 0.6).expect("default bins are valid"),
            sentence_policy: SentencePolicy::default(),
            tsne: TsneParams::default(),
            dispersion: DispersionOptions::default(),
            entropy_mode: EntropyMode::Raw,
            correlation: CorrelationOptions::default(),
            grid: None,
            epsilon: 1e-6,
            min_contexts: 3,
            align_bin_width: 0.5,
        }
    }
}

pub const KEYS: &[&str] = &[
    "run_id",
    "baseline_model",
    "vision_model",
    "norms",
    "norms_word_col",
    "norms_mean_col",
    "norms_sd_col",
    "norms_scale",
    "function_words",
    "named_entities",
    "bins",
    "include_function_words",
    "include_other_oov",
    "perplexity",
    "iterations",
    "learning_rate",
    "early_exaggeration",
    "exaggeration_iters",
    "momentum_initial",
    "momentum_final",
    "init_scale",
    "tsne_seed",
    "metric",
    "pair_cap",
    "dispersion_seed",
    "entropy_mode",
    "min_tokens",
    "include_zero_scored",
    "per_question",
    "grid",
    "epsilon",
    "min_contexts",
    "align_bin_width",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        };
        match key {
            "run_id" => self.run_id = value.into(),
            "baseline_model" => self.baseline_model = value.into(),
            "vision_model" => self.vision_model = value.into(),
            "norms" => self.norms = PathBuf::from(value),
            "norms_word_col" => self.norms_columns.word = value.into(),
            "norms_mean_col" => self.norms_columns.mean = value.into(),
            "norms_sd_col" => self.norms_columns.sd = value.into(),
            "norms_scale" => self.norms_scale = parse(key, value)?,
            "function_words" => self.function_words = optional_path(value),
            "named_entities" => self.named_entities = optional_path(value),
            "bins" => self.bins = parse(key, value)?,
            "include_function_words" => self.sentence_policy.include_function_words = parse(key, value)?,
            "include_other_oov" => self.sentence_policy.include_other_oov = parse(key, value)?,
            "perplexity" => self.tsne.perplexity = parse(key, value)?,
            "iterations" => self.tsne.iterations = parse(key, value)?,
            "learning_rate" => self.tsne.learning_rate = parse(key, value)?,
            "early_exaggeration" => self.tsne.early_exaggeration = parse(key, value)?,
            "exaggeration_iters" => self.tsne.exaggeration_iters = parse(key, value)?,
            "momentum_initial" => self.tsne.momentum_initial = parse(key, value)?,
            "momentum_final" => self.tsne.momentum_final = parse(key, value)?,
            "init_scale" => self.tsne.init_scale = parse(key, value)?,
            "tsne_seed" => self.tsne.seed = parse(key, value)?,
            "metric" => {
                self.dispersion.metric = match value {
                    "cosine" => DistanceMetric::Cosine,
                    "euclidean" => DistanceMetric::Euclidean,
                    _ => return Err(bad("expected cosine or euclidean")),
                }
            }
            "pair_cap" => {
                self.dispersion.pair_cap = match value {
                    "" | "none" => None,
                    v => {
                        let cap: usize = parse(key, v)?;
                        if cap < 2 {
                            return Err(bad("must be at least 2"));
                        }
                        Some(cap)
                    }
                }
            }
            "dispersion_seed" => self.dispersion.seed = parse(key, value)?,
            "entropy_mode" => {
                self.entropy_mode = match value {
                    "raw" => EntropyMode::Raw,
                    "length_normalized" => EntropyMode::LengthNormalized,
                    _ => return Err(bad("expected raw or length_normalized")),
                }
            }
            "min_tokens" => self.correlation.min_n = parse(key, value)?,
            "include_zero_scored" => self.correlation.include_zero_scored = parse(key, value)?,
            "per_question" => self.correlation.per_question = parse(key, value)?,
            "grid" => {
                self.grid = match value {
                    "" | "default" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "epsilon" => {
                let eps: f64 = parse(key, value)?;
                if !(eps.is_finite() && eps >= 0.0) {
                    return Err(bad("must be finite and non-negative"));
                }
                self.epsilon = eps;
            }
            "min_contexts" => self.min_contexts = parse(key, value)?,
            "align_bin_width" => {
                let w: f64 = parse(key, value)?;
                if !(w.is_finite() && w > 0.0) {
                    return Err(bad("must be positive"));
                }
                self.align_bin_width = w;
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn rating_grid(&self) -> Result<RatingGrid, crate::alignment::AlignmentError> {
        match &self.grid {
            Some(g) => Ok(g.clone()),
            None => RatingGrid::default_for(self.norms_scale.min, self.norms_scale.max),
        }
    }

    pub fn alignment_options(&self) -> Result<AlignmentOptions, crate::alignment::AlignmentError> {
        Ok(AlignmentOptions {
            grid: self.rating_grid()?,
            epsilon: self.epsilon,
            min_contexts: self.min_contexts,
            bin_width: self.align_bin_width,
        })
    }

    /// Every key with its effective value, in key order. Feeding the echo back
    /// through [`RunConfig::set`] reproduces this config.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let grid = self
            .rating_grid()
            .map(|g| g.to_string())
            .unwrap_or_else(|e| format!("invalid ({e})"));
        let pairs: Vec<(&str, String)> = vec![
            ("run_id", self.run_id.clone()),
            ("baseline_model", self.baseline_model.clone()),
            ("vision_model", self.vision_model.clone()),
            ("norms", self.norms.display().to_string()),
            ("norms_word_col", self.norms_columns.word.clone()),
            ("norms_mean_col", self.norms_columns.mean.clone()),
            ("norms_sd_col", self.norms_columns.sd.clone()),
            ("norms_scale", self.norms_scale.to_string()),
            ("function_words", path(&self.function_words)),
            ("named_entities", path(&self.named_entities)),
            ("bins", self.bins.to_string()),
            ("include_function_words", self.sentence_policy.include_function_words.to_string()),
            ("include_other_oov", self.sentence_policy.include_other_oov.to_string()),
            ("perplexity", self.tsne.perplexity.to_string()),
            ("iterations", self.tsne.iterations.to_string()),
            ("learning_rate", self.tsne.learning_rate.to_string()),
            ("early_exaggeration", self.tsne.early_exaggeration.to_string()),
            ("exaggeration_iters", self.tsne.exaggeration_iters.to_string()),
            ("momentum_initial", self.tsne.momentum_initial.to_string()),
            ("momentum_final", self.tsne.momentum_final.to_string()),
            ("init_scale", self.tsne.init_scale.to_string()),
            ("tsne_seed", self.tsne.seed.to_string()),
            (
                "metric",
                match self.dispersion.metric {
                    DistanceMetric::Cosine => "cosine",
                    DistanceMetric::Euclidean => "euclidean",
                }
                .into(),
            ),
            ("pair_cap", self.dispersion.pair_cap.map_or("none".into(), |c| c.to_string())),
            ("dispersion_seed", self.dispersion.seed.to_string()),
            (
                "entropy_mode",
                match self.entropy_mode {
                    EntropyMode::Raw => "raw",
                    EntropyMode::LengthNormalized => "length_normalized",
                }
                .into(),
            ),
            ("min_tokens", self.correlation.min_n.to_string()),
            ("include_zero_scored", self.correlation.include_zero_scored.to_string()),
            ("per_question", self.correlation.per_question.to_string()),
            ("grid", grid),
            ("epsilon", self.epsilon.to_string()),
            ("min_contexts", self.min_contexts.to_string()),
            ("align_bin_width", self.align_bin_width.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
