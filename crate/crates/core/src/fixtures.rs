//! Deterministic synthetic model pair: a run directory whose "vision" model is
//! built to be more concreteness-aware than its "baseline" on every analysis.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::{json, Map};
use thiserror::Error;

use crate::attention::{head_average_entropy, AttentionTensor};
use crate::behavior::QARecord;
use crate::geometry::{concreteness_bin, EmbeddingMatrix};
use crate::norms::{NormEntry, NormsTable, Scale, Scorer, SentencePolicy, WordSet};
use crate::tensor::{write_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("fixture generation failed: {0}")]
    Internal(String),
}

const SYLLABLE_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "pl"];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const FILLERS: &[&str] = &["the", "of", "and", "to", "in", "a", "is", "with", "for", "on"];

/// Everything that shapes the synthetic pair. Written next to the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureParams {
    pub seed: u64,
    pub baseline_model: String,
    pub vision_model: String,
    pub vocabulary: usize,
    pub uncovered_words: usize,
    pub datasets: Vec<String>,
    pub questions_per_dataset: usize,
    pub words_per_question: usize,
    pub baseline_accuracy: f64,
    /// Vision accuracy = baseline + slope * (concreteness - pivot).
    pub vision_accuracy_slope: f64,
    pub vision_accuracy_pivot: f64,
    pub embedding_dim: usize,
    pub cluster_radius: f64,
    pub vision_cluster_noise: f64,
    pub baseline_center_scale: f64,
    pub baseline_cluster_noise: f64,
    pub sequences: usize,
    pub tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub filler_rate: f64,
    pub split_rate: f64,
    /// Rows sharpen with concreteness by `coupling(layer)`: a logistic ramp
    /// from `*_coupling_early` to `*_coupling_late` centred mid-stack.
    pub vision_coupling_early: f64,
    pub vision_coupling_late: f64,
    pub baseline_coupling_early: f64,
    pub baseline_coupling_late: f64,
    pub sharpness_base: f64,
    pub sharpness_noise: f64,
    pub precomputed_sheets: usize,
    pub contexts_per_word: usize,
    pub sparse_words: usize,
    /// Rating bias = strength * (scale_max - mean) / span.
    pub vision_rating_bias: f64,
    pub vision_rating_noise: f64,
    pub baseline_rating_bias: f64,
    pub baseline_rating_noise: f64,
}

impl FixtureParams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            baseline_model: "baseline".into(),
            vision_model: "vision".into(),
            vocabulary: 300,
            uncovered_words: 8,
            datasets: vec!["synth_objects".into(), "synth_scenes".into()],
            questions_per_dataset: 400,
            words_per_question: 6,
            baseline_accuracy: 0.6,
            vision_accuracy_slope: 0.16,
            vision_accuracy_pivot: 3.3,
            embedding_dim: 16,
            cluster_radius: 5.0,
            vision_cluster_noise: 0.5,
            baseline_center_scale: 0.2,
            baseline_cluster_noise: 1.0,
            sequences: 40,
            tokens: 16,
            layers: 8,
            heads: 4,
            filler_rate: 0.3,
            split_rate: 0.2,
            vision_coupling_early: 0.15,
            vision_coupling_late: 0.6,
            baseline_coupling_early: 0.05,
            baseline_coupling_late: 0.12,
            sharpness_base: 0.6,
            sharpness_noise: 0.15,
            precomputed_sheets: 4,
            contexts_per_word: 5,
            sparse_words: 10,
            vision_rating_bias: 0.9,
            vision_rating_noise: 0.35,
            baseline_rating_bias: 1.2,
            baseline_rating_noise: 0.45,
        }
    }
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, avoid: &WordSet) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    SYLLABLE_ONSETS.choose(rng).expect("non-empty"),
                    SYLLABLE_VOWELS.choose(rng).expect("non-empty")
                )
            })
            .collect();
        if !avoid.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), FixtureError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| FixtureError::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the seed's run directory under `out_dir` with the default parameters.
pub fn generate_fixtures(seed: u64, out_dir: &Path) -> Result<FixtureParams, FixtureError> {
    let params = FixtureParams::new(seed);
    generate_with(&params, out_dir)?;
    Ok(params)
}

pub fn generate_with(params: &FixtureParams, out_dir: &Path) -> Result<(), FixtureError> {
    for sub in ["qa", "embeddings", "attention", "ratings"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let stop = WordSet::default_function_words();
    let scale = Scale::default();

    // Norms.
    let all_words = pseudo_words(&mut rng, params.vocabulary + params.uncovered_words, &stop);
    let (vocab, uncovered) = all_words.split_at(params.vocabulary);
    let entries: Vec<(String, NormEntry)> = vocab
        .iter()
        .map(|w| {
            let mean = round2(rng.random_range(1.05..4.98));
            let sd = round2(rng.random_range(0.6..1.3));
            (w.clone(), NormEntry { mean, sd, n_raters: None })
        })
        .collect();
    let mut csv = String::from("Word,Conc.M,Conc.SD\n");
    for (w, e) in &entries {
        csv.push_str(&format!("{w},{:.2},{:.2}\n", e.mean, e.sd));
    }
    fs::write(out_dir.join("norms.csv"), csv)?;
    let norms = NormsTable::from_entries(entries.iter().map(|(w, e)| (w.as_str(), *e)), scale)
        .map_err(|e| FixtureError::Internal(e.to_string()))?;
    let scorer = Scorer::new(&norms, &stop);

    qa_fixture(params, &mut rng, &entries, &scorer, out_dir)?;
    embedding_fixture(params, &mut rng, &entries, uncovered, out_dir)?;
    attention_fixture(params, &mut rng, &entries, out_dir)?;
    rating_fixture(params, &mut rng, &entries, uncovered, scale, out_dir)?;

    let conf = format!(
        "# synthetic model pair, seed {}\nrun_id = synthetic-seed{}\nbaseline_model = {}\nvision_model = {}\nnorms = norms.csv\n",
        params.seed, params.seed, params.baseline_model, params.vision_model
    );
    fs::write(out_dir.join("probe.conf"), conf)?;
    let record = serde_json::to_string_pretty(params).map_err(|e| FixtureError::Internal(e.to_string()))?;
    fs::write(out_dir.join("fixture_params.json"), record + "\n")?;
    Ok(())
}

fn qa_fixture(
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
    entries: &[(String, NormEntry)],
    scorer: &Scorer<'_>,
    out_dir: &Path,
) -> Result<(), FixtureError> {
    let mut baseline = Vec::new();
    let mut vision = Vec::new();
    for dataset in &params.datasets {
        for q in 0..params.questions_per_dataset {
            let target = rng.random_range(1.75..4.85);
            let mut width = 0.35;
            let pool: Vec<&String> = loop {
                let pool: Vec<&String> = entries
                    .iter()
                    .filter(|(_, e)| (e.mean - target).abs() <= width)
                    .map(|(w, _)| w)
                    .collect();
                if pool.len() >= params.words_per_question {
                    break pool;
                }
                width += 0.1;
            };
            let words: Vec<&str> = (0..params.words_per_question)
                .map(|_| pool.choose(rng).expect("non-empty").as_str())
                .collect();
            let text = format!("{}?", words.join(" "));
            let concreteness = scorer
                .score_text(&text, SentencePolicy::default())
                .map_err(|e| FixtureError::Internal(e.to_string()))?;
            // Shared uniform draw: the two models differ only through their
            // accuracy curves.
            let u: f64 = rng.random();
            let p_vision = (params.baseline_accuracy
                + params.vision_accuracy_slope * (concreteness - params.vision_accuracy_pivot))
                .clamp(0.02, 0.98);
            let id = format!("q{q:04}");
            let record = |model: &str, correct: bool| QARecord {
                model_id: model.into(),
                dataset: dataset.clone(),
                question_id: id.clone(),
                question_text: text.clone(),
                correct,
                sentence_concreteness: None,
            };
            baseline.push(record(&params.baseline_model, u < params.baseline_accuracy));
            vision.push(record(&params.vision_model, u < p_vision));
        }
    }
    jsonl(&out_dir.join("qa").join(format!("{}.jsonl", params.baseline_model)), &baseline)?;
    jsonl(&out_dir.join("qa").join(format!("{}.jsonl", params.vision_model)), &vision)?;
    Ok(())
}

fn embedding_fixture(
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
    entries: &[(String, NormEntry)],
    uncovered: &[String],
    out_dir: &Path,
) -> Result<(), FixtureError> {
    let d = params.embedding_dim;
    let unit = Normal::new(0.0, 1.0).map_err(|e| FixtureError::Internal(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| unit.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm * params.cluster_radius).collect()
        })
        .collect();
    let mut words: Vec<String> = entries.iter().map(|(w, _)| w.clone()).collect();
    words.extend(uncovered.iter().cloned());
    let mut bins: Vec<usize> = entries.iter().map(|(_, e)| usize::from(concreteness_bin(e.mean)) - 1).collect();
    bins.extend(uncovered.iter().map(|_| rng.random_range(0..5)));
    for (model, center_scale, noise) in [
        (&params.vision_model, 1.0, params.vision_cluster_noise),
        (&params.baseline_model, params.baseline_center_scale, params.baseline_cluster_noise),
    ] {
        let vectors: Vec<f64> = bins
            .iter()
            .flat_map(|&b| centers[b].iter().map(|c| c * center_scale).collect::<Vec<_>>())
            .map(|c| c + noise * unit.sample(rng))
            .collect();
        let matrix = EmbeddingMatrix::new(words.clone(), vectors, d)
            .map_err(|e| FixtureError::Internal(e.to_string()))?;
        write_tensor(&matrix.to_tensor(model), out_dir.join("embeddings").join(format!("{model}.tns")))?;
    }
    Ok(())
}

fn attention_fixture(
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
    entries: &[(String, NormEntry)],
    out_dir: &Path,
) -> Result<(), FixtureError> {
    let unit = Normal::new(0.0, 1.0).map_err(|e| FixtureError::Internal(e.to_string()))?;
    let (t_len, n_layers, heads) = (params.tokens, params.layers, params.heads);
    for s in 0..params.sequences {
        // Token layout shared by both models.
        let mut words = Vec::with_capacity(t_len);
        let mut word_index = Vec::with_capacity(t_len);
        let mut conc = Vec::with_capacity(t_len);
        let mut w = 0;
        while words.len() < t_len {
            let (word, c) = if w > 0 && rng.random_bool(params.filler_rate) {
                (FILLERS.choose(rng).expect("non-empty").to_string(), 0.0)
            } else {
                let (word, e) = entries.choose(rng).expect("non-empty");
                (word.clone(), e.mean)
            };
            let pieces = if words.len() + 1 < t_len && rng.random_bool(params.split_rate) { 2 } else { 1 };
            for _ in 0..pieces {
                words.push(word.clone());
                word_index.push(w);
                conc.push(c);
            }
            w += 1;
        }
        let sequence = format!("s{s:03}");
        for (model, early, late) in [
            (&params.vision_model, params.vision_coupling_early, params.vision_coupling_late),
            (&params.baseline_model, params.baseline_coupling_early, params.baseline_coupling_late),
        ] {
            let precompute = model == &params.baseline_model && s < params.precomputed_sheets;
            let mut sheet = Vec::with_capacity(n_layers * t_len);
            for layer in 0..n_layers {
                let coupling = early
                    + (late - early) * sigmoid(1.2 * (layer as f64 - (n_layers as f64 - 1.0) / 2.0));
                let mut data = vec![0.0f64; heads * t_len * t_len];
                for h in 0..heads {
                    for i in 0..t_len {
                        let kappa = (params.sharpness_base
                            + coupling * conc[i]
                            + params.sharpness_noise * unit.sample(rng))
                        .max(0.05);
                        let logits: Vec<f64> = (0..=i).map(|_| kappa * unit.sample(rng)).collect();
                        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                        for (j, l) in logits.iter().enumerate() {
                            data[(h * t_len + i) * t_len + j] = (l - m).exp() / z;
                        }
                    }
                }
                let mut meta = Map::new();
                meta.insert("kind".into(), json!("attention"));
                meta.insert("model_id".into(), json!(model));
                meta.insert("sequence".into(), json!(sequence));
                meta.insert("layer".into(), json!(layer));
                meta.insert("causal".into(), json!(true));
                meta.insert("words".into(), json!(words));
                meta.insert("word_index".into(), json!(word_index));
                let tensor = Tensor::new(
                    vec![heads, t_len, t_len],
                    data.iter().map(|&v| v as f32).collect(),
                    meta,
                )?;
                if precompute {
                    let parsed = AttentionTensor::from_tensor(&tensor).map_err(|e| FixtureError::Internal(e.to_string()))?;
                    sheet.extend(head_average_entropy(&parsed).map_err(|e| FixtureError::Internal(e.to_string()))?);
                } else {
                    write_tensor(&tensor, out_dir.join("attention").join(format!("{model}_{sequence}_l{layer:02}.tns")))?;
                }
            }
            if precompute {
                let mut meta = Map::new();
                meta.insert("kind".into(), json!("entropy_sheet"));
                meta.insert("model_id".into(), json!(model));
                meta.insert("sequence".into(), json!(sequence));
                meta.insert("words".into(), json!(words));
                meta.insert("word_index".into(), json!(word_index));
                let tensor = Tensor::new(vec![n_layers, t_len], sheet.iter().map(|&v| v as f32).collect(), meta)?;
                write_tensor(&tensor, out_dir.join("attention").join(format!("{model}_{sequence}_sheet.tns")))?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RatingRow<'a> {
    model_id: &'a str,
    context_id: String,
    word: &'a str,
    rating: f64,
}

fn rating_fixture(
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
    entries: &[(String, NormEntry)],
    uncovered: &[String],
    scale: Scale,
    out_dir: &Path,
) -> Result<(), FixtureError> {
    let unit = Normal::new(0.0, 1.0).map_err(|e| FixtureError::Internal(e.to_string()))?;
    let span = scale.max - scale.min;
    for (model, bias, noise) in [
        (&params.vision_model, params.vision_rating_bias, params.vision_rating_noise),
        (&params.baseline_model, params.baseline_rating_bias, params.baseline_rating_noise),
    ] {
        let mut rows = Vec::new();
        let targets = entries
            .iter()
            .map(|(w, e)| (w.as_str(), e.mean))
            .chain(uncovered.iter().map(|w| (w.as_str(), 3.0)));
        for (k, (word, mean)) in targets.enumerate() {
            let contexts = if k < params.sparse_words { 2 } else { params.contexts_per_word };
            let shift = bias * (scale.max - mean) / span;
            for c in 0..contexts {
                let raw = mean + shift + noise * unit.sample(rng);
                let rating = ((raw.clamp(scale.min, scale.max)) * 10.0).round() / 10.0;
                rows.push(RatingRow {
                    model_id: model,
                    context_id: format!("{word}-c{c}"),
                    word,
                    rating,
                });
            }
        }
        jsonl(&out_dir.join("ratings").join(format!("{model}.jsonl")), &rows)?;
    }
    Ok(())
}
