//! Run-directory analysis: reads `qa/*.jsonl`, `embeddings/*.tns`,
//! `attention/*.tns` and `ratings/*.jsonl` next to an optional `probe.conf`
//! and assembles the report.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::alignment::{align, read_ratings_jsonl, RatingRecord};
use crate::attention::{collect_sheets, layer_correlations, mean_layer_r, sigmoid_fit, AttentionError};
use crate::behavior::{
    accuracy_gap, bin_accuracy, bin_accuracy_by_dataset, gap_trend, overall_accuracy, read_qa_jsonl,
    score_records, QARecord,
};
use crate::config::{ConfigError, RunConfig};
use crate::error::ErrorKind;
use crate::geometry::{analyze_embeddings, EmbeddingMatrix};
use crate::norms::{load_norms, NormsTable, Scorer, WordSet};
use crate::report::{
    build_report, AlignmentSection, AttentionModel, AttentionSection, BehaviorSection, DiagnosticsReport,
    GeometryModel, GeometrySection, ModelAccuracy, ModelPair, ReportError, Section, Sections,
};
use crate::tensor::{read_tensor, Tensor};

pub const CONFIG_FILE: &str = "probe.conf";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{context}: {message}")]
    Analysis {
        context: String,
        kind: ErrorKind,
        message: String,
    },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Analysis { kind, .. } => *kind,
            _ => ErrorKind::Input,
        }
    }

    fn input(context: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Analysis {
            context: context.into(),
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }
}

macro_rules! section_err {
    ($context:expr) => {
        |e| PipelineError::Analysis {
            context: $context.to_string(),
            kind: e.kind(),
            message: e.to_string(),
        }
    };
}

/// Norms and word lists shared by every section.
#[derive(Debug, Clone)]
pub struct Resources {
    pub norms: NormsTable,
    pub function_words: WordSet,
    pub named_entities: Option<WordSet>,
}

impl Resources {
    pub fn scorer(&self) -> Scorer<'_> {
        let s = Scorer::new(&self.norms, &self.function_words);
        match &self.named_entities {
            Some(ne) => s.with_named_entities(ne),
            None => s,
        }
    }
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads norms and word lists; relative paths resolve against `base`.
pub fn load_resources(config: &RunConfig, base: &Path) -> Result<Resources, PipelineError> {
    let norms_path = resolve(base, &config.norms);
    let file = fs::File::open(&norms_path).map_err(|source| PipelineError::Read {
        path: norms_path.clone(),
        source,
    })?;
    let loaded = load_norms(BufReader::new(file), &config.norms_columns, config.norms_scale)
        .map_err(section_err!(norms_path.display()))?;
    if loaded.duplicates > 0 {
        log::warn!("norms: {} duplicate rows ignored", loaded.duplicates);
    }
    let function_words = match &config.function_words {
        Some(p) => WordSet::parse(&read_text(&resolve(base, p))?),
        None => WordSet::default_function_words(),
    };
    let named_entities = match &config.named_entities {
        Some(p) => Some(WordSet::parse(&read_text(&resolve(base, p))?)),
        None => None,
    };
    Ok(Resources {
        norms: loaded.table,
        function_words,
        named_entities,
    })
}

/// Defaults, then `probe.conf` from the run directory if present, then the
/// `key=value` overrides in order.
pub fn load_config(run_dir: &Path, overrides: &[String]) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::default();
    let path = run_dir.join(CONFIG_FILE);
    if path.is_file() {
        config.apply_file(&read_text(&path)?)?;
    }
    for o in overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

/// Files in `dir` with the given extension, sorted by name. `None` when the
/// directory does not exist.
pub fn list_files(dir: &Path, extension: &str) -> Result<Option<Vec<PathBuf>>, PipelineError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let entries = fs::read_dir(dir).map_err(|source| PipelineError::Read {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        let p = e
            .map_err(|source| PipelineError::Read {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if p.is_file() && p.extension().is_some_and(|x| x == extension) {
            out.push(p);
        }
    }
    out.sort();
    Ok(Some(out))
}

pub fn read_qa_files(paths: &[PathBuf]) -> Result<Vec<QARecord>, PipelineError> {
    let mut out = Vec::new();
    for p in paths {
        let f = fs::File::open(p).map_err(|source| PipelineError::Read { path: p.clone(), source })?;
        out.extend(read_qa_jsonl(BufReader::new(f)).map_err(section_err!(p.display()))?);
    }
    Ok(out)
}

pub fn read_rating_files(paths: &[PathBuf]) -> Result<Vec<RatingRecord>, PipelineError> {
    let mut out = Vec::new();
    for p in paths {
        let f = fs::File::open(p).map_err(|source| PipelineError::Read { path: p.clone(), source })?;
        out.extend(read_ratings_jsonl(BufReader::new(f)).map_err(section_err!(p.display()))?);
    }
    Ok(out)
}

pub fn read_tensors(paths: &[PathBuf]) -> Result<Vec<Tensor>, PipelineError> {
    paths
        .iter()
        .map(|p| read_tensor(p).map_err(section_err!(p.display())))
        .collect()
}

fn group_by_model<T>(items: Vec<T>, model: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<T>> {
    let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        out.entry(model(&item).to_owned()).or_default().push(item);
    }
    out
}

fn require_pair<T>(map: &BTreeMap<String, T>, config: &RunConfig, what: &str) -> Result<(), PipelineError> {
    for m in [&config.baseline_model, &config.vision_model] {
        if !map.contains_key(m.as_str()) {
            return Err(PipelineError::input(
                what,
                format!("no data for model {m:?} (found {:?})", map.keys().collect::<Vec<_>>()),
            ));
        }
    }
    Ok(())
}

pub fn behavior_section(
    records: Vec<QARecord>,
    resources: &Resources,
    config: &RunConfig,
) -> Result<BehaviorSection, PipelineError> {
    let mut by_model = group_by_model(records, |r| &r.model_id);
    require_pair(&by_model, config, "behavior")?;
    let scorer = resources.scorer();
    let mut models = BTreeMap::new();
    for (model, records) in &mut by_model {
        score_records(records, &scorer, config.sentence_policy).map_err(section_err!("behavior"))?;
        let bins = bin_accuracy(records, &config.bins).map_err(section_err!("behavior"))?;
        if bins.out_of_range > 0 {
            log::info!("behavior: {model}: {} questions outside {}", bins.out_of_range, config.bins);
        }
        let per_dataset = bin_accuracy_by_dataset(records, &config.bins)
            .map_err(section_err!("behavior"))?
            .into_iter()
            .map(|(d, b)| (d, b.series()))
            .collect();
        models.insert(
            model.clone(),
            ModelAccuracy {
                series: bins.series(),
                total: bins.total(),
                out_of_range: bins.out_of_range,
                overall_accuracy: overall_accuracy(records),
                per_dataset,
            },
        );
    }
    let gap = accuracy_gap(&models[&config.vision_model].series, &models[&config.baseline_model].series)
        .map_err(section_err!("behavior"))?;
    let trend = match gap_trend(&gap) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("behavior: no gap trend: {e}");
            None
        }
    };
    Ok(BehaviorSection {
        bins: config.bins.to_string(),
        models,
        gap,
        trend,
    })
}

pub fn geometry_section(
    tensors: Vec<Tensor>,
    resources: &Resources,
    config: &RunConfig,
) -> Result<GeometrySection, PipelineError> {
    let mut models = BTreeMap::new();
    for t in tensors {
        let model = t
            .meta_str("model_id")
            .ok_or_else(|| PipelineError::input("geometry", "embedding container without model_id"))?
            .to_owned();
        let matrix = EmbeddingMatrix::from_tensor(&t).map_err(section_err!(format!("geometry: {model}")))?;
        let result = analyze_embeddings(&matrix, &resources.norms, &config.tsne, &config.dispersion)
            .map_err(section_err!(format!("geometry: {model}")))?;
        let entry = GeometryModel {
            n_types: result.n_types,
            uncovered: result.uncovered,
            final_kl: result.final_kl,
            dispersion: result.dispersion,
        };
        if models.insert(model.clone(), entry).is_some() {
            return Err(PipelineError::input("geometry", format!("two embedding containers for {model:?}")));
        }
    }
    let (compared_bins, vision_lower_bins) = match (
        models.get(&config.baseline_model),
        models.get(&config.vision_model),
    ) {
        (Some(b), Some(v)) => {
            let compared: Vec<u8> = v
                .dispersion
                .per_bin
                .keys()
                .filter(|k| b.dispersion.per_bin.contains_key(k))
                .copied()
                .collect();
            let lower = compared
                .iter()
                .filter(|k| v.dispersion.per_bin[k].value < b.dispersion.per_bin[k].value)
                .copied()
                .collect();
            (compared, lower)
        }
        _ => (Vec::new(), Vec::new()),
    };
    Ok(GeometrySection {
        models,
        compared_bins,
        vision_lower_bins,
    })
}

pub fn attention_section(
    tensors: &[Tensor],
    resources: &Resources,
    config: &RunConfig,
) -> Result<AttentionSection, PipelineError> {
    let scorer = resources.scorer();
    let sheets = collect_sheets(tensors, &scorer, config.entropy_mode).map_err(section_err!("attention"))?;
    let mut models = BTreeMap::new();
    for (model, sheets) in &sheets {
        let layers = layer_correlations(sheets, &config.correlation).map_err(section_err!(format!("attention: {model}")))?;
        let mean_r = match mean_layer_r(&layers) {
            Ok(r) => Some(r),
            Err(AttentionError::NoDefinedLayers) => None,
            Err(e) => {
                return Err(PipelineError::Analysis {
                    context: format!("attention: {model}"),
                    kind: e.kind(),
                    message: e.to_string(),
                })
            }
        };
        let (xs, ys): (Vec<f64>, Vec<f64>) = layers
            .iter()
            .filter_map(|c| c.r.map(|r| (c.layer as f64, r)))
            .unzip();
        let sigmoid = if xs.len() >= 5 {
            Some(sigmoid_fit(&xs, &ys).map_err(section_err!(format!("attention: {model}")))?)
        } else {
            None
        };
        models.insert(
            model.clone(),
            AttentionModel {
                sequences: sheets.len(),
                layers,
                mean_r,
                sigmoid,
            },
        );
    }
    let mean = |m: &str| models.get(m).and_then(|a: &AttentionModel| a.mean_r);
    let mean_r_difference = match (mean(&config.vision_model), mean(&config.baseline_model)) {
        (Some(v), Some(b)) => Some(v - b),
        _ => None,
    };
    Ok(AttentionSection {
        entropy_mode: config.entropy_mode,
        models,
        mean_r_difference,
    })
}

pub fn alignment_section(
    records: Vec<RatingRecord>,
    resources: &Resources,
    config: &RunConfig,
) -> Result<AlignmentSection, PipelineError> {
    let options = config.alignment_options().map_err(section_err!("alignment"))?;
    let mut models = BTreeMap::new();
    for (model, records) in group_by_model(records, |r| &r.model_id) {
        let result = align(&records, &resources.norms, &options).map_err(section_err!(format!("alignment: {model}")))?;
        models.insert(model, result);
    }
    Ok(AlignmentSection {
        grid: options.grid.to_string(),
        epsilon: options.epsilon,
        min_contexts: options.min_contexts,
        human_distribution: "discretized Gaussian from norms mean and sd (approximation: per-rater responses unavailable)".into(),
        models,
    })
}

fn gather<T>(
    dir: &Path,
    extension: &str,
    label: &str,
    read: impl FnOnce(&[PathBuf]) -> Result<T, PipelineError>,
) -> Result<Result<T, String>, PipelineError> {
    match list_files(dir, extension)? {
        None => Ok(Err(format!("no {label}/ directory"))),
        Some(files) if files.is_empty() => Ok(Err(format!("no .{extension} files in {label}/"))),
        Some(files) => Ok(Ok(read(&files)?)),
    }
}

/// Analyses a whole run directory.
pub fn run(run_dir: &Path, config: &RunConfig) -> Result<DiagnosticsReport, PipelineError> {
    let resources = load_resources(config, run_dir)?;
    let behavior = match gather(&run_dir.join("qa"), "jsonl", "qa", read_qa_files)? {
        Ok(records) => Section::Completed(behavior_section(records, &resources, config)?),
        Err(reason) => Section::skipped(reason),
    };
    let geometry = match gather(&run_dir.join("embeddings"), "tns", "embeddings", read_tensors)? {
        Ok(tensors) => Section::Completed(geometry_section(tensors, &resources, config)?),
        Err(reason) => Section::skipped(reason),
    };
    let attention = match gather(&run_dir.join("attention"), "tns", "attention", read_tensors)? {
        Ok(tensors) => Section::Completed(attention_section(&tensors, &resources, config)?),
        Err(reason) => Section::skipped(reason),
    };
    let alignment = match gather(&run_dir.join("ratings"), "jsonl", "ratings", read_rating_files)? {
        Ok(records) => Section::Completed(alignment_section(records, &resources, config)?),
        Err(reason) => Section::skipped(reason),
    };
    Ok(build_report(
        &config.run_id,
        ModelPair {
            baseline: config.baseline_model.clone(),
            vision: config.vision_model.clone(),
        },
        Sections {
            behavior,
            geometry,
            attention,
            alignment,
        },
        config.echo(),
    )?)
}
