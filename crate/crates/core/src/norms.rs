//! Human concreteness norms and word/sentence/subword scoring.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::stats;

const DEFAULT_FUNCTION_WORDS: &str = include_str!("../data/function_words.txt");

#[derive(Debug, Error)]
pub enum NormsError {
    #[error("norms table has no column named {0:?}")]
    MissingColumn(String),
    #[error("norms line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("norms table has no data rows")]
    Empty,
    #[error("malformed delimited input: {0}")]
    Csv(String),
    #[error("invalid rating scale {0:?}, expected MIN:MAX with MIN < MAX")]
    InvalidScale(String),
    #[error("word {0:?} is empty after normalization")]
    EmptyWord(String),
    #[error("cannot score an empty sentence")]
    EmptySentence,
    #[error("subword alignment is invalid: {0}")]
    BadAlignment(String),
    #[error("subword alignment refers to word {index} but only {n_words} words were given")]
    WordIndexOutOfRange { index: usize, n_words: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed rating interval of the norms, e.g. 1..5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scale {
    pub min: f64,
    pub max: f64,
}

impl Scale {
    pub fn new(min: f64, max: f64) -> Result<Self, NormsError> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(NormsError::InvalidScale(format!("{min}:{max}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }
}

impl Default for Scale {
    fn default() -> Self {
        Self { min: 1.0, max: 5.0 }
    }
}

impl FromStr for Scale {
    type Err = NormsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NormsError::InvalidScale(s.to_owned());
        let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        Scale::new(lo, hi).map_err(|_| bad())
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEntry {
    pub mean: f64,
    pub sd: f64,
    pub n_raters: Option<u32>,
}

/// Lower-cased word -> human rating summary.
#[derive(Debug, Clone, PartialEq)]
pub struct NormsTable {
    entries: BTreeMap<String, NormEntry>,
    scale: Scale,
}

impl NormsTable {
    /// Builds a table from in-memory entries; later duplicates are ignored.
    pub fn from_entries<I, S>(entries: I, scale: Scale) -> Result<Self, NormsError>
    where
        I: IntoIterator<Item = (S, NormEntry)>,
        S: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (i, (word, entry)) in entries.into_iter().enumerate() {
            let line = i as u64 + 1;
            let key = word.as_ref().trim().to_lowercase();
            validate_entry(&key, &entry, scale).map_err(|message| NormsError::Row { line, message })?;
            map.entry(key).or_insert(entry);
        }
        if map.is_empty() {
            return Err(NormsError::Empty);
        }
        Ok(Self {
            entries: map,
            scale,
        })
    }

    pub fn get(&self, word: &str) -> Option<&NormEntry> {
        match self.entries.get(word) {
            Some(e) => Some(e),
            None => self.entries.get(&word.to_lowercase()),
        }
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic word order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &NormEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn validate_entry(word: &str, entry: &NormEntry, scale: Scale) -> Result<(), String> {
    if word.is_empty() {
        return Err("empty word".into());
    }
    if !entry.mean.is_finite() || !scale.contains(entry.mean) {
        return Err(format!(
            "mean {} for {word:?} outside scale [{}, {}]",
            entry.mean, scale.min, scale.max
        ));
    }
    if !entry.sd.is_finite() || entry.sd < 0.0 {
        return Err(format!("sd {} for {word:?} must be >= 0", entry.sd));
    }
    Ok(())
}

/// Header names of the norms columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnMap {
    pub word: String,
    pub mean: String,
    pub sd: String,
    pub n_raters: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            word: "Word".into(),
            mean: "Conc.M".into(),
            sd: "Conc.SD".into(),
            n_raters: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedNorms {
    pub table: NormsTable,
    /// Rows dropped because their lower-cased word was already present.
    pub duplicates: usize,
}

/// Reads a comma- or tab-delimited norms table with a header row.
pub fn load_norms<R: Read>(
    mut source: R,
    columns: &ColumnMap,
    scale: Scale,
) -> Result<LoadedNorms, NormsError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let header_line = text.lines().next().unwrap_or_default();
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| NormsError::Csv(e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NormsError::MissingColumn(name.to_owned()))
    };
    let word_col = find(&columns.word)?;
    let mean_col = find(&columns.mean)?;
    let sd_col = find(&columns.sd)?;
    let raters_col = columns.n_raters.as_deref().map(find).transpose()?;

    let mut entries = BTreeMap::new();
    let mut duplicates = 0;
    for record in reader.records() {
        let record = record.map_err(|e| NormsError::Csv(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| NormsError::Row { line, message };
        let cell = |idx: usize, name: &str| {
            record
                .get(idx)
                .ok_or_else(|| row_err(format!("missing {name} cell")))
        };
        let number = |idx: usize, name: &str| -> Result<f64, NormsError> {
            let raw = cell(idx, name)?;
            raw.parse::<f64>()
                .map_err(|_| row_err(format!("cannot parse {name} value {raw:?}")))
        };

        let word = cell(word_col, "word")?.to_lowercase();
        let entry = NormEntry {
            mean: number(mean_col, "mean")?,
            sd: number(sd_col, "sd")?,
            n_raters: match raters_col {
                Some(idx) => Some(
                    cell(idx, "rater count")?
                        .parse::<u32>()
                        .map_err(|_| row_err("cannot parse rater count".into()))?,
                ),
                None => None,
            },
        };
        validate_entry(&word, &entry, scale).map_err(row_err)?;
        if entries.contains_key(&word) {
            duplicates += 1;
            continue;
        }
        entries.insert(word, entry);
    }
    if entries.is_empty() {
        return Err(NormsError::Empty);
    }
    if duplicates > 0 {
        log::warn!("norms: {duplicates} duplicate word rows ignored (first occurrence kept)");
    }
    Ok(LoadedNorms {
        table: NormsTable { entries, scale },
        duplicates,
    })
}

/// A set of normalized words (function-word stoplist or named-entity list).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordSet(HashSet<String>);

impl WordSet {
    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(normalize_word)
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// The stoplist shipped with the crate.
    pub fn default_function_words() -> Self {
        Self::parse(DEFAULT_FUNCTION_WORDS)
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.0.contains(normalized)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for WordSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(|w| normalize_word(w.as_ref())).collect())
    }
}

/// Strips leading/trailing punctuation and lower-cases.
pub fn normalize_word(raw: &str) -> String {
    strip_punctuation(raw).to_lowercase()
}

fn strip_punctuation(raw: &str) -> &str {
    raw.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Whitespace split, dropping pieces that are pure punctuation.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .filter(|w| !strip_punctuation(w).is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LexicalClass {
    Covered,
    FunctionWord,
    ProperNounOov,
    OtherOov,
}

impl LexicalClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            LexicalClass::Covered => "covered",
            LexicalClass::FunctionWord => "function_word",
            LexicalClass::ProperNounOov => "proper_noun_oov",
            LexicalClass::OtherOov => "other_oov",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordToken {
    pub surface: String,
    pub normalized: String,
    pub position: usize,
    pub lexical_class: LexicalClass,
    pub score: f64,
}

/// Assigns word-level concreteness from a norms table.
///
/// Lookup order: norms entry, then function-word stoplist, then proper-noun
/// detection (capitalized at a non-initial position, or listed as a named
/// entity), else other OOV.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    norms: &'a NormsTable,
    function_words: &'a WordSet,
    named_entities: Option<&'a WordSet>,
}

impl<'a> Scorer<'a> {
    pub fn new(norms: &'a NormsTable, function_words: &'a WordSet) -> Self {
        Self {
            norms,
            function_words,
            named_entities: None,
        }
    }

    pub fn with_named_entities(mut self, entities: &'a WordSet) -> Self {
        self.named_entities = Some(entities);
        self
    }

    pub fn norms(&self) -> &'a NormsTable {
        self.norms
    }

    pub fn classify(&self, word: &str, position: usize) -> Result<WordToken, NormsError> {
        let stripped = strip_punctuation(word);
        if stripped.is_empty() {
            return Err(NormsError::EmptyWord(word.to_owned()));
        }
        let normalized = stripped.to_lowercase();
        let (lexical_class, score) = if let Some(entry) = self.norms.get(&normalized) {
            (LexicalClass::Covered, entry.mean)
        } else if self.function_words.contains(&normalized) {
            (LexicalClass::FunctionWord, 0.0)
        } else if self.is_proper_noun(stripped, &normalized, position) {
            (LexicalClass::ProperNounOov, self.norms.scale().max)
        } else {
            (LexicalClass::OtherOov, 0.0)
        };
        Ok(WordToken {
            surface: stripped.to_owned(),
            normalized,
            position,
            lexical_class,
            score,
        })
    }

    fn is_proper_noun(&self, stripped: &str, normalized: &str, position: usize) -> bool {
        if self
            .named_entities
            .is_some_and(|set| set.contains(normalized))
        {
            return true;
        }
        position > 0 && stripped.chars().next().is_some_and(char::is_uppercase)
    }

    /// Tokenizes and scores every word of `text`.
    pub fn score_words(&self, text: &str) -> Result<Vec<WordToken>, NormsError> {
        tokenize(text)
            .into_iter()
            .enumerate()
            .map(|(i, w)| self.classify(w, i))
            .collect()
    }

    /// Sentence concreteness of raw text under `policy`.
    pub fn score_text(&self, text: &str, policy: SentencePolicy) -> Result<f64, NormsError> {
        score_sentence_with(&self.score_words(text)?, policy)
    }
}

/// Free-function form of [`Scorer::classify`] without a named-entity list.
pub fn classify_and_score(
    word: &str,
    sentence_position: usize,
    norms: &NormsTable,
    function_words: &WordSet,
) -> Result<WordToken, NormsError> {
    Scorer::new(norms, function_words).classify(word, sentence_position)
}

/// Which zero-scored tokens enter the sentence mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SentencePolicy {
    pub include_function_words: bool,
    pub include_other_oov: bool,
}

impl Default for SentencePolicy {
    fn default() -> Self {
        Self {
            include_function_words: true,
            include_other_oov: true,
        }
    }
}

impl SentencePolicy {
    fn admits(&self, class: LexicalClass) -> bool {
        match class {
            LexicalClass::FunctionWord => self.include_function_words,
            LexicalClass::OtherOov => self.include_other_oov,
            _ => true,
        }
    }
}

/// Mean of the token scores, zero-scored tokens included.
pub fn score_sentence(tokens: &[WordToken]) -> Result<f64, NormsError> {
    score_sentence_with(tokens, SentencePolicy::default())
}

pub fn score_sentence_with(tokens: &[WordToken], policy: SentencePolicy) -> Result<f64, NormsError> {
    let scores: Vec<f64> = tokens
        .iter()
        .filter(|t| policy.admits(t.lexical_class))
        .map(|t| t.score)
        .collect();
    stats::mean(&scores).ok_or(NormsError::EmptySentence)
}

/// Maps each subtoken to the index of the word it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubwordAlignment {
    word_index_per_subtoken: Vec<usize>,
}

impl SubwordAlignment {
    /// Indices must start at 0 and advance by 0 or 1, so every word up to the
    /// last one owns at least one subtoken.
    pub fn new(word_index_per_subtoken: Vec<usize>) -> Result<Self, NormsError> {
        let mut prev: Option<usize> = None;
        for (i, &w) in word_index_per_subtoken.iter().enumerate() {
            let ok = match prev {
                None => w == 0,
                Some(p) => w == p || w == p + 1,
            };
            if !ok {
                return Err(NormsError::BadAlignment(format!(
                    "subtoken {i} maps to word {w} after word {}",
                    prev.map_or("<start>".to_string(), |p| p.to_string())
                )));
            }
            prev = Some(w);
        }
        Ok(Self {
            word_index_per_subtoken,
        })
    }

    /// One subtoken per word.
    pub fn identity(n_words: usize) -> Self {
        Self {
            word_index_per_subtoken: (0..n_words).collect(),
        }
    }

    pub fn n_subtokens(&self) -> usize {
        self.word_index_per_subtoken.len()
    }

    pub fn n_words(&self) -> usize {
        self.word_index_per_subtoken.last().map_or(0, |&w| w + 1)
    }

    pub fn word_indices(&self) -> &[usize] {
        &self.word_index_per_subtoken
    }
}

/// Copies each word's score onto all of its subtokens.
pub fn propagate_subwords(
    tokens: &[WordToken],
    alignment: &SubwordAlignment,
) -> Result<Vec<(usize, f64)>, NormsError> {
    alignment
        .word_indices()
        .iter()
        .enumerate()
        .map(|(sub, &word)| {
            tokens
                .get(word)
                .map(|t| (sub, t.score))
                .ok_or(NormsError::WordIndexOutOfRange {
                    index: word,
                    n_words: tokens.len(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = "Word,Conc.M,Conc.SD\napple,4.9,0.3\nidea,1.6,0.9\nrun,4.0,0.6\n";

    fn fixture() -> NormsTable {
        load_norms(FIXTURE.as_bytes(), &ColumnMap::default(), Scale::default())
            .unwrap()
            .table
    }

    fn stop() -> WordSet {
        ["the", "a", "of"].into_iter().collect()
    }

    #[test]
    fn loads_three_rows() {
        let loaded = load_norms(FIXTURE.as_bytes(), &ColumnMap::default(), Scale::default()).unwrap();
        assert_eq!(loaded.table.len(), 3);
        assert_eq!(loaded.duplicates, 0);
        assert_eq!(loaded.table.get("idea").unwrap().sd, 0.9);
    }

    #[test]
    fn duplicate_rows_keep_first() {
        let text = format!("{FIXTURE}APPLE,2.0,0.1\n");
        let loaded = load_norms(text.as_bytes(), &ColumnMap::default(), Scale::default()).unwrap();
        assert_eq!(loaded.table.len(), 3);
        assert_eq!(loaded.duplicates, 1);
        assert_eq!(loaded.table.get("apple").unwrap().mean, 4.9);
    }

    #[test]
    fn out_of_scale_mean_is_row_error() {
        let text = "Word,Conc.M,Conc.SD\napple,4.9,0.3\nidea,7.2,0.9\n";
        let err = load_norms(text.as_bytes(), &ColumnMap::default(), Scale::default()).unwrap_err();
        assert!(matches!(err, NormsError::Row { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn schema_and_parse_errors() {
        let cols = ColumnMap {
            mean: "Mean".into(),
            ..ColumnMap::default()
        };
        assert!(matches!(
            load_norms(FIXTURE.as_bytes(), &cols, Scale::default()),
            Err(NormsError::MissingColumn(c)) if c == "Mean"
        ));
        let text = "Word,Conc.M,Conc.SD\napple,x,0.3\n";
        assert!(matches!(
            load_norms(text.as_bytes(), &ColumnMap::default(), Scale::default()),
            Err(NormsError::Row { line: 2, .. })
        ));
        let text = "Word,Conc.M,Conc.SD\n";
        assert!(matches!(
            load_norms(text.as_bytes(), &ColumnMap::default(), Scale::default()),
            Err(NormsError::Empty)
        ));
    }

    #[test]
    fn tab_delimited_with_rater_column() {
        let text = "Word\tBigram\tConc.M\tConc.SD\tN\nbanana\t0\t5\t0\t28\n";
        let cols = ColumnMap {
            n_raters: Some("N".into()),
            ..ColumnMap::default()
        };
        let table = load_norms(text.as_bytes(), &cols, Scale::default()).unwrap().table;
        assert_eq!(table.get("banana").unwrap().n_raters, Some(28));
    }

    #[test]
    fn scale_parsing() {
        assert_eq!("1:7".parse::<Scale>().unwrap(), Scale { min: 1.0, max: 7.0 });
        assert!("5:1".parse::<Scale>().is_err());
        assert!("1-5".parse::<Scale>().is_err());
    }

    #[test]
    fn classifies_per_rules() {
        let norms = fixture();
        let stop = stop();
        let t = classify_and_score("apple", 3, &norms, &stop).unwrap();
        assert_eq!((t.lexical_class, t.score), (LexicalClass::Covered, 4.9));
        let t = classify_and_score("the", 0, &norms, &stop).unwrap();
        assert_eq!((t.lexical_class, t.score), (LexicalClass::FunctionWord, 0.0));
        let t = classify_and_score("Beyonce", 3, &norms, &stop).unwrap();
        assert_eq!((t.lexical_class, t.score), (LexicalClass::ProperNounOov, 5.0));
        // Sentence-initial capital is not evidence of a proper noun.
        let t = classify_and_score("Zorbly", 0, &norms, &stop).unwrap();
        assert_eq!((t.lexical_class, t.score), (LexicalClass::OtherOov, 0.0));
        // Covered words win over capitalization.
        let t = classify_and_score("Apple,", 2, &norms, &stop).unwrap();
        assert_eq!((t.lexical_class, t.score), (LexicalClass::Covered, 4.9));
        assert!(matches!(
            classify_and_score("?!", 1, &norms, &stop),
            Err(NormsError::EmptyWord(_))
        ));
    }

    #[test]
    fn named_entity_list_marks_proper_nouns() {
        let norms = fixture();
        let stop = stop();
        let entities: WordSet = ["paris"].into_iter().collect();
        let scorer = Scorer::new(&norms, &stop).with_named_entities(&entities);
        let t = scorer.classify("paris", 0).unwrap();
        assert_eq!(t.lexical_class, LexicalClass::ProperNounOov);
        assert_eq!(t.score, 5.0);
    }

    fn token(score: f64, class: LexicalClass) -> WordToken {
        WordToken {
            surface: "w".into(),
            normalized: "w".into(),
            position: 0,
            lexical_class: class,
            score,
        }
    }

    #[test]
    fn sentence_mean_includes_zeros() {
        let tokens = [
            token(4.9, LexicalClass::Covered),
            token(0.0, LexicalClass::FunctionWord),
            token(3.1, LexicalClass::Covered),
        ];
        let s = score_sentence(&tokens).unwrap();
        assert!((s - 8.0 / 3.0).abs() < 1e-12);
        assert!((s - 2.6667).abs() < 1e-4);
        assert_eq!(score_sentence(&tokens[..1]).unwrap(), 4.9);
        assert!(matches!(score_sentence(&[]), Err(NormsError::EmptySentence)));

        let policy = SentencePolicy {
            include_function_words: false,
            include_other_oov: true,
        };
        assert!((score_sentence_with(&tokens, policy).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn six_token_sentence_matches_hand_sum() {
        let norms = fixture();
        let stop = stop();
        let scorer = Scorer::new(&norms, &stop);
        let tokens = scorer.score_words("The apple of Zed's idea, run!").unwrap();
        assert_eq!(tokens.len(), 6);
        // the=0, apple=4.9, of=0, Zed's=5 (capitalized, OOV), idea=1.6, run=4.0
        let hand = (0.0 + 4.9 + 0.0 + 5.0 + 1.6 + 4.0) / 6.0;
        assert!((score_sentence(&tokens).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn subword_propagation() {
        let tokens = [token(4.9, LexicalClass::Covered), token(0.0, LexicalClass::FunctionWord)];
        let align = SubwordAlignment::new(vec![0, 0, 1]).unwrap();
        assert_eq!(
            propagate_subwords(&tokens, &align).unwrap(),
            vec![(0, 4.9), (1, 4.9), (2, 0.0)]
        );
        let one = SubwordAlignment::identity(1);
        assert_eq!(propagate_subwords(&tokens[..1], &one).unwrap(), vec![(0, 4.9)]);
        let three = SubwordAlignment::new(vec![0, 1, 2]).unwrap();
        assert!(matches!(
            propagate_subwords(&tokens, &three),
            Err(NormsError::WordIndexOutOfRange { index: 2, .. })
        ));
        assert!(SubwordAlignment::new(vec![0, 2]).is_err());
        assert!(SubwordAlignment::new(vec![1]).is_err());
        assert!(SubwordAlignment::new(vec![0, 1, 0]).is_err());
    }

    #[test]
    fn random_alignment_matches_expansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let tokens: Vec<WordToken> = (0..20)
            .map(|_| token(rng.random_range(0.0..5.0), LexicalClass::Covered))
            .collect();
        // Brute-force expansion: repeat each word's score k_i times.
        let mut expected = Vec::new();
        let mut indices = Vec::new();
        for (w, t) in tokens.iter().enumerate() {
            for _ in 0..rng.random_range(1..=4) {
                expected.push(t.score);
                indices.push(w);
            }
        }
        let align = SubwordAlignment::new(indices).unwrap();
        let got = propagate_subwords(&tokens, &align).unwrap();
        assert_eq!(got.len(), expected.len());
        for (i, (sub, score)) in got.into_iter().enumerate() {
            assert_eq!(sub, i);
            assert_eq!(score, expected[i]);
        }
    }

    #[test]
    fn default_stoplist_is_loaded() {
        let stop = WordSet::default_function_words();
        assert!(stop.contains("the") && stop.contains("of") && stop.contains("they"));
        assert!(!stop.contains("apple"));
    }

    fn covered_table() -> NormsTable {
        let entries = (0..40).map(|i| {
            (
                format!("w{i}"),
                NormEntry {
                    mean: 1.0 + (i as f64) * 0.1,
                    sd: 0.5,
                    n_raters: None,
                },
            )
        });
        NormsTable::from_entries(entries, Scale::default()).unwrap()
    }

    proptest! {
        #[test]
        fn sentence_score_permutation_invariant_and_bounded(
            idx in proptest::collection::vec(0usize..40, 1..30),
            shift in 0usize..30,
        ) {
            let norms = covered_table();
            let stop = WordSet::default();
            let scorer = Scorer::new(&norms, &stop);
            let words: Vec<String> = idx.iter().map(|i| format!("w{i}")).collect();
            let tokens: Vec<WordToken> = words.iter().enumerate()
                .map(|(p, w)| scorer.classify(w, p).unwrap()).collect();
            let mut rotated = tokens.clone();
            rotated.rotate_left(shift % tokens.len());
            let a = score_sentence(&tokens).unwrap();
            let b = score_sentence(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=5.0).contains(&a));
            // All words covered: equals the plain mean of norms means.
            let direct: f64 = idx.iter().map(|&i| 1.0 + i as f64 * 0.1).sum::<f64>() / idx.len() as f64;
            prop_assert!((a - direct).abs() < 1e-12);
        }

        #[test]
        fn classify_is_idempotent_and_case_insensitive(i in 0usize..40, pos in 0usize..10, upper in any::<bool>()) {
            let norms = covered_table();
            let stop = WordSet::default();
            let scorer = Scorer::new(&norms, &stop);
            let w = format!("w{i}");
            let shown = if upper { w.to_uppercase() } else { w.clone() };
            let first = scorer.classify(&shown, pos).unwrap();
            let again = scorer.classify(&first.surface, pos).unwrap();
            prop_assert_eq!(&first, &again);
            prop_assert_eq!(first.score, scorer.classify(&w, pos).unwrap().score);
        }

        #[test]
        fn propagation_preserves_parent_scores(counts in proptest::collection::vec(1usize..5, 1..15)) {
            let tokens: Vec<WordToken> = counts.iter().enumerate()
                .map(|(i, _)| token(i as f64 * 0.3, LexicalClass::Covered)).collect();
            let indices: Vec<usize> = counts.iter().enumerate()
                .flat_map(|(w, &k)| std::iter::repeat_n(w, k)).collect();
            let align = SubwordAlignment::new(indices.clone()).unwrap();
            let out = propagate_subwords(&tokens, &align).unwrap();
            prop_assert_eq!(out.len(), align.n_subtokens());
            let diff: f64 = out.iter().map(|&(s, score)| score - tokens[indices[s]].score).sum();
            prop_assert_eq!(diff, 0.0);
        }
    }
}
