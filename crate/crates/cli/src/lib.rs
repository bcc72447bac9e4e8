//! `probe`: command-line front end. [`run`] is the whole program minus logger
//! setup, so it can be driven in-process.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use concreteness_probe::config::{ConfigError, RunConfig};
use concreteness_probe::fixtures::generate_fixtures;
use concreteness_probe::geometry::{analyze_embeddings, EmbeddingMatrix};
use concreteness_probe::pipeline::{self, PipelineError, Resources};
use concreteness_probe::report::{self, build_report, DiagnosticsReport, ModelPair, Section, Sections};
use concreteness_probe::tensor::write_tensor;
use concreteness_probe::ErrorKind;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nreport schema: concreteness-probe/1\ntensor format: CPROBE01 v1"
);

#[derive(Debug, Parser)]
#[command(name = "probe", version, long_version = LONG_VERSION, about = "Concreteness diagnostics for matched language-model pairs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Override one config key (repeatable), e.g. --config perplexity=20
    #[arg(long = "config", value_name = "KEY=VALUE", global = true)]
    pub config: Vec<String>,
    /// Plain key = value file applied before --config overrides
    #[arg(long, value_name = "PATH", global = true)]
    pub config_file: Option<PathBuf>,
    /// Worker threads; 1 keeps runs bit-reproducible
    #[arg(long, default_value_t = 1, global = true)]
    pub threads: usize,
    /// Norms table (CSV or TSV with a header row) [default: norms.csv]
    #[arg(long, value_name = "PATH", global = true)]
    pub norms: Option<PathBuf>,
    /// Word column of the norms table [default: Word]
    #[arg(long, global = true)]
    pub norms_word_col: Option<String>,
    /// Mean column of the norms table [default: Conc.M]
    #[arg(long, global = true)]
    pub norms_mean_col: Option<String>,
    /// Standard-deviation column of the norms table [default: Conc.SD]
    #[arg(long, global = true)]
    pub norms_sd_col: Option<String>,
    /// Rating scale of the norms, MIN:MAX [default: 1:5]
    #[arg(long, value_name = "MIN:MAX", global = true)]
    pub norms_scale: Option<String>,
    /// Function-word list, one per line [default: built-in list]
    #[arg(long, value_name = "PATH", global = true)]
    pub function_words: Option<PathBuf>,
    /// Extra named entities scored as proper nouns, one per line
    #[arg(long, value_name = "PATH", global = true)]
    pub named_entities: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score sentences: per-token class and score, then the sentence mean
    Score(ScoreArgs),
    /// Accuracy by question concreteness and the vision-minus-baseline gap
    Behavior(BehaviorArgs),
    /// t-SNE of type embeddings and per-bin dispersion
    Geometry(GeometryArgs),
    /// Layerwise correlation of attention entropy with token concreteness
    Attention(AttentionArgs),
    /// Divergence between model and human rating distributions
    Align(AlignArgs),
    /// Every analysis over a run directory
    Report(ReportArgs),
    /// Write the synthetic model pair used by the tests
    Fixtures(FixturesArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Report path [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Directory for figure CSV and SVG files
    #[arg(long, value_name = "DIR")]
    pub figures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Sentence to score
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub text: Option<String>,
    /// File with one sentence per line
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Leave function words out of the sentence mean
    #[arg(long)]
    pub exclude_function_words: bool,
    /// Leave unknown words out of the sentence mean
    #[arg(long)]
    pub exclude_other_oov: bool,
}

#[derive(Debug, Args)]
pub struct BehaviorArgs {
    /// QA records of the vision model (JSON lines)
    #[arg(long, value_name = "PATH", required = true)]
    pub qa: Vec<PathBuf>,
    /// QA records of the baseline model (JSON lines)
    #[arg(long, value_name = "PATH", required = true)]
    pub qa_baseline: Vec<PathBuf>,
    /// Concreteness bins LO:HI:WIDTH [default: 1.8:4.8:0.6]
    #[arg(long, value_name = "LO:HI:WIDTH")]
    pub bins: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// Embedding containers, one per model
    #[arg(long, value_name = "PATH", required = true)]
    pub embeddings: Vec<PathBuf>,
    /// [default: 30]
    #[arg(long)]
    pub perplexity: Option<String>,
    /// [default: 1000]
    #[arg(long)]
    pub iterations: Option<String>,
    /// [default: 42]
    #[arg(long)]
    pub tsne_seed: Option<String>,
    /// cosine or euclidean [default: cosine]
    #[arg(long)]
    pub metric: Option<String>,
    /// Sample pairs in bins larger than this [default: exact]
    #[arg(long)]
    pub pair_cap: Option<String>,
    /// Also write the 2-D layouts as containers into this directory
    #[arg(long, value_name = "DIR")]
    pub planar_out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Attention or entropy-sheet containers, or directories of them
    #[arg(long, value_name = "PATH", required = true)]
    pub attention: Vec<PathBuf>,
    /// raw or length_normalized [default: raw]
    #[arg(long)]
    pub entropy_mode: Option<String>,
    /// Fewest tokens for a defined layer r [default: 10]
    #[arg(long)]
    pub min_tokens: Option<String>,
    /// Keep zero-scored tokens in the correlation
    #[arg(long)]
    pub include_zero_scored: bool,
    /// Average per-sequence r instead of pooling tokens
    #[arg(long)]
    pub per_question: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Model ratings (JSON lines)
    #[arg(long, value_name = "PATH", required = true)]
    pub ratings: Vec<PathBuf>,
    /// Rating grid MIN:MAX:STEP [default: norms scale in steps of 0.1]
    #[arg(long, value_name = "MIN:MAX:STEP")]
    pub grid: Option<String>,
    /// Additive smoothing per grid cell [default: 1e-6]
    #[arg(long)]
    pub epsilon: Option<String>,
    /// Fewest ratings for a word to be kept [default: 3]
    #[arg(long)]
    pub min_contexts: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory with qa/, embeddings/, attention/, ratings/ and probe.conf
    #[arg(long, value_name = "DIR")]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Input(_) => EXIT_INPUT,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.kind() {
            ErrorKind::Input => Failure::Input(e.to_string()),
            ErrorKind::Numeric => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        match e {
            report::ReportError::NothingCompleted => Failure::Input(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first) and runs the command; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.global.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Defaults, then the config file, then `--config`, then explicit flags.
fn base_config(global: &GlobalArgs, mut config: RunConfig) -> Result<RunConfig, Failure> {
    if let Some(path) = &global.config_file {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        config.apply_file(&text)?;
    }
    for pair in &global.config {
        config.apply_override(pair)?;
    }
    let flags: [(&str, Option<String>); 7] = [
        ("norms", global.norms.as_ref().map(|p| p.display().to_string())),
        ("norms_word_col", global.norms_word_col.clone()),
        ("norms_mean_col", global.norms_mean_col.clone()),
        ("norms_sd_col", global.norms_sd_col.clone()),
        ("norms_scale", global.norms_scale.clone()),
        ("function_words", global.function_words.as_ref().map(|p| p.display().to_string())),
        ("named_entities", global.named_entities.as_ref().map(|p| p.display().to_string())),
    ];
    apply_flags(&mut config, &flags)?;
    Ok(config)
}

fn apply_flags(config: &mut RunConfig, flags: &[(&str, Option<String>)]) -> Result<(), Failure> {
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    Ok(())
}

fn resources(config: &RunConfig) -> Result<Resources, Failure> {
    Ok(pipeline::load_resources(config, Path::new("."))?)
}

fn write_report(report: &DiagnosticsReport, output: &OutputArgs) -> Result<(), Failure> {
    let json = report::to_json(report)?;
    match &output.out {
        Some(path) => fs::write(path, &json).map_err(|e| io_failure(path, e))?,
        None => io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| Failure::Input(format!("stdout: {e}")))?,
    }
    if let Some(dir) = &output.figures {
        for path in report::emit_figures(report, dir)? {
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn single_section_report(config: &RunConfig, sections: Sections, output: &OutputArgs) -> Result<(), Failure> {
    let report = build_report(
        &config.run_id,
        ModelPair {
            baseline: config.baseline_model.clone(),
            vision: config.vision_model.clone(),
        },
        sections,
        config.echo(),
    )?;
    write_report(&report, output)
}

fn skipped_except(reason: &str) -> Sections {
    Sections {
        behavior: Section::skipped(reason),
        geometry: Section::skipped(reason),
        attention: Section::skipped(reason),
        alignment: Section::skipped(reason),
    }
}

fn sole_model<'a>(ids: impl Iterator<Item = &'a str>, what: &Path) -> Result<Option<String>, Failure> {
    let mut found: Option<&str> = None;
    for id in ids {
        match found {
            None => found = Some(id),
            Some(f) if f != id => {
                return Err(Failure::Input(format!(
                    "{}: mixes models {f:?} and {id:?}",
                    what.display()
                )))
            }
            _ => {}
        }
    }
    Ok(found.map(str::to_owned))
}

#[derive(Serialize)]
struct ScoredToken<'a> {
    surface: &'a str,
    class: &'static str,
    score: f64,
}

#[derive(Serialize)]
struct ScoredSentence<'a> {
    text: &'a str,
    score: f64,
    tokens: Vec<ScoredToken<'a>>,
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let global = &cli.global;
    match &cli.command {
        Command::Score(args) => {
            let mut config = base_config(global, RunConfig::default())?;
            config.sentence_policy.include_function_words &= !args.exclude_function_words;
            config.sentence_policy.include_other_oov &= !args.exclude_other_oov;
            let res = resources(&config)?;
            let scorer = res.scorer();
            let lines: Vec<String> = match (&args.text, &args.input) {
                (Some(t), _) => vec![t.clone()],
                (None, Some(p)) => {
                    let f = fs::File::open(p).map_err(|e| io_failure(p, e))?;
                    io::BufReader::new(f)
                        .lines()
                        .collect::<Result<_, _>>()
                        .map_err(|e| io_failure(p, e))?
                }
                (None, None) => return Err(Failure::Usage("give --text or --input".into())),
            };
            let mut stdout = io::stdout().lock();
            for line in lines.iter().filter(|l| !l.trim().is_empty()) {
                let tokens = scorer.score_words(line).map_err(|e| Failure::Input(e.to_string()))?;
                let score = concreteness_probe::norms::score_sentence_with(&tokens, config.sentence_policy)
                    .map_err(|e| Failure::Input(e.to_string()))?;
                let out = ScoredSentence {
                    text: line,
                    score,
                    tokens: tokens
                        .iter()
                        .map(|t| ScoredToken {
                            surface: &t.surface,
                            class: t.lexical_class.as_str(),
                            score: t.score,
                        })
                        .collect(),
                };
                let json = serde_json::to_string(&out).map_err(|e| Failure::Input(e.to_string()))?;
                writeln!(stdout, "{json}").map_err(|e| Failure::Input(format!("stdout: {e}")))?;
            }
            Ok(())
        }
        Command::Behavior(args) => {
            let mut config = base_config(global, RunConfig::default())?;
            apply_flags(&mut config, &[("bins", args.bins.clone())])?;
            let vision = pipeline::read_qa_files(&args.qa)?;
            let baseline = pipeline::read_qa_files(&args.qa_baseline)?;
            if let Some(id) = sole_model(vision.iter().map(|r| r.model_id.as_str()), &args.qa[0])? {
                config.vision_model = id;
            }
            if let Some(id) = sole_model(baseline.iter().map(|r| r.model_id.as_str()), &args.qa_baseline[0])? {
                config.baseline_model = id;
            }
            if config.vision_model == config.baseline_model {
                return Err(Failure::Input(format!(
                    "--qa and --qa-baseline both hold model {:?}",
                    config.vision_model
                )));
            }
            let res = resources(&config)?;
            let mut records = vision;
            records.extend(baseline);
            let section = pipeline::behavior_section(records, &res, &config)?;
            let mut sections = skipped_except("not requested");
            sections.behavior = Section::Completed(section);
            single_section_report(&config, sections, &args.output)
        }
        Command::Geometry(args) => {
            let mut config = base_config(global, RunConfig::default())?;
            apply_flags(
                &mut config,
                &[
                    ("perplexity", args.perplexity.clone()),
                    ("iterations", args.iterations.clone()),
                    ("tsne_seed", args.tsne_seed.clone()),
                    ("metric", args.metric.clone()),
                    ("pair_cap", args.pair_cap.clone()),
                ],
            )?;
            let res = resources(&config)?;
            let tensors = pipeline::read_tensors(&args.embeddings)?;
            if let Some(dir) = &args.planar_out {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
                for t in &tensors {
                    let model = t.meta_str("model_id").unwrap_or("model").to_owned();
                    let matrix = EmbeddingMatrix::from_tensor(t).map_err(|e| Failure::Input(e.to_string()))?;
                    let result = analyze_embeddings(&matrix, &res.norms, &config.tsne, &config.dispersion)
                        .map_err(|e| match e.kind() {
                            ErrorKind::Input => Failure::Input(e.to_string()),
                            ErrorKind::Numeric => Failure::Numeric(e.to_string()),
                        })?;
                    let path = dir.join(format!("{model}_planar.tns"));
                    write_tensor(&result.planar.to_tensor(&model), &path)
                        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
                }
            }
            let section = pipeline::geometry_section(tensors, &res, &config)?;
            let mut sections = skipped_except("not requested");
            sections.geometry = Section::Completed(section);
            single_section_report(&config, sections, &args.output)
        }
        Command::Attention(args) => {
            let mut config = base_config(global, RunConfig::default())?;
            apply_flags(
                &mut config,
                &[
                    ("entropy_mode", args.entropy_mode.clone()),
                    ("min_tokens", args.min_tokens.clone()),
                    ("include_zero_scored", args.include_zero_scored.then(|| "true".into())),
                    ("per_question", args.per_question.then(|| "true".into())),
                ],
            )?;
            let res = resources(&config)?;
            let mut files = Vec::new();
            for p in &args.attention {
                if p.is_dir() {
                    files.extend(pipeline::list_files(p, "tns")?.unwrap_or_default());
                } else {
                    files.push(p.clone());
                }
            }
            let tensors = pipeline::read_tensors(&files)?;
            let section = pipeline::attention_section(&tensors, &res, &config)?;
            let mut sections = skipped_except("not requested");
            sections.attention = Section::Completed(section);
            single_section_report(&config, sections, &args.output)
        }
        Command::Align(args) => {
            let mut config = base_config(global, RunConfig::default())?;
            apply_flags(
                &mut config,
                &[
                    ("grid", args.grid.clone()),
                    ("epsilon", args.epsilon.clone()),
                    ("min_contexts", args.min_contexts.clone()),
                ],
            )?;
            config.alignment_options().map_err(|e| Failure::Usage(e.to_string()))?;
            let res = resources(&config)?;
            let records = pipeline::read_rating_files(&args.ratings)?;
            let section = pipeline::alignment_section(records, &res, &config)?;
            let mut sections = skipped_except("not requested");
            sections.alignment = Section::Completed(section);
            single_section_report(&config, sections, &args.output)
        }
        Command::Report(args) => {
            if !args.run_dir.is_dir() {
                return Err(Failure::Input(format!("{} is not a directory", args.run_dir.display())));
            }
            // Flags are checked on their own first so that a bad flag is a
            // usage error even when the run directory's config is broken.
            base_config(global, RunConfig::default())?;
            let from_dir = pipeline::load_config(&args.run_dir, &[])?;
            let config = base_config(global, from_dir)?;
            let report = pipeline::run(&args.run_dir, &config)?;
            write_report(&report, &args.output)
        }
        Command::Fixtures(args) => {
            let params = generate_fixtures(args.seed, &args.out).map_err(|e| Failure::Input(e.to_string()))?;
            log::info!("wrote synthetic pair (seed {}) to {}", params.seed, args.out.display());
            Ok(())
        }
    }
}
