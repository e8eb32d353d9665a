//! Heuristic terminology-corpus curation.
//!
//! Lines of a coarse crawled corpus are scored by how much of the target
//! vocabulary they cover, penalized by their share of the corpus length, and
//! filtered repeatedly until the corpus is small enough.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// SHA-256 of `data/stopwords_en.txt`.
pub const STOPWORDS_SHA256: &str =
    "33dc07fa5def1d0aad0e7fbfeeb58771f0ccf96b36aa34c28c36c33b9b3a54ab";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CurationError {
    #[error("empty overlap vocabulary")]
    EmptyOverlap,
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("threshold too aggressive: no line scored above {delta} (max score {max_score})")]
    ThresholdTooAggressive { delta: f64, max_score: f64 },
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
}

/// The vendored English stopword list.
pub fn default_stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_EN
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect()
    })
}

pub fn stopwords_checksum() -> String {
    let digest = Sha256::digest(STOPWORDS_EN.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Lowercase, split on non-alphanumeric runs, drop pure-digit tokens.
pub fn curation_tokens(text: &str) -> Vec<String> {
    crate::text::word_pieces(text)
        .filter(|w| !w.chars().all(|c| c.is_ascii_digit()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusLine {
    pub text: String,
    pub tokens: Vec<String>,
    pub original_index: usize,
}

impl CorpusLine {
    pub fn new(text: impl Into<String>, original_index: usize) -> Self {
        let text = text.into();
        let tokens = curation_tokens(&text);
        Self {
            text,
            tokens,
            original_index,
        }
    }

    pub fn word_types(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    lines: Vec<CorpusLine>,
    token_count: usize,
    pub source_id: String,
}

impl Corpus {
    pub fn from_lines(lines: Vec<CorpusLine>, source_id: impl Into<String>) -> Self {
        let token_count = lines.iter().map(|l| l.tokens.len()).sum();
        Self {
            lines,
            token_count,
            source_id: source_id.into(),
        }
    }

    /// One line per newline-terminated line of `text`.
    pub fn from_text(text: &str, source_id: impl Into<String>) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| CorpusLine::new(l, i))
            .collect();
        Self::from_lines(lines, source_id)
    }

    pub fn lines(&self) -> &[CorpusLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn word_types(&self) -> BTreeSet<&str> {
        self.lines
            .iter()
            .flat_map(|l| l.tokens.iter().map(String::as_str))
            .collect()
    }

    /// Lines in original order, newline-terminated.
    pub fn to_text(&self) -> String {
        self.lines.iter().fold(String::new(), |mut s, l| {
            s.push_str(&l.text);
            s.push('\n');
            s
        })
    }
}

/// Anything whose word types can be intersected with a vocabulary.
pub trait WordTypes {
    fn contains_word(&self, word: &str) -> bool;
}

impl WordTypes for CorpusLine {
    fn contains_word(&self, word: &str) -> bool {
        self.tokens.iter().any(|t| t == word)
    }
}

impl WordTypes for Corpus {
    fn contains_word(&self, word: &str) -> bool {
        self.lines.iter().any(|l| l.contains_word(word))
    }
}

impl WordTypes for BTreeSet<&str> {
    fn contains_word(&self, word: &str) -> bool {
        self.contains(word)
    }
}

/// Lowercased, stopword-free set of word types.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverlapVocab {
    words: BTreeSet<String>,
}

impl OverlapVocab {
    pub fn new<I, S>(words: I, stopwords: &HashSet<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !stopwords.contains(w))
            .collect();
        Self { words }
    }

    pub fn words(&self) -> &BTreeSet<String> {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// How the length penalty measures a line and the corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMeasure {
    /// Token counts with repetition.
    #[default]
    Tokens,
    /// Distinct word types.
    DistinctWords,
}

#[derive(Clone, Debug)]
pub struct CurationConfig {
    pub delta: f64,
    pub top_k: usize,
    pub stopwords: HashSet<String>,
    /// Stop once the line count is at most this fraction of the original.
    pub target_fraction: Option<f64>,
    pub max_iterations: usize,
    pub length_measure: LengthMeasure,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            delta: 0.0,
            top_k: 1000,
            stopwords: default_stopwords().clone(),
            target_fraction: Some(0.5),
            max_iterations: 10,
            length_measure: LengthMeasure::Tokens,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.top_k == 0 {
            return Err(CurationError::InvalidConfig("top_k must be >= 1".into()));
        }
        if let Some(f) = self.target_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(CurationError::InvalidConfig(format!(
                    "target fraction {f} outside [0, 1]"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(CurationError::InvalidConfig(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !self.delta.is_finite() {
            return Err(CurationError::InvalidConfig("delta must be finite".into()));
        }
        Ok(())
    }
}

/// The `top_k` most frequent non-stopword types; ties go to the
/// lexicographically smaller word.
pub fn top_frequent_vocab(c: &Corpus, cfg: &CurationConfig) -> Result<OverlapVocab, CurationError> {
    if c.is_empty() {
        return Err(CurationError::EmptyCorpus("vocabulary source"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in c.lines.iter().flat_map(|l| &l.tokens) {
        if !cfg.stopwords.contains(tok) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(OverlapVocab::new(
        ranked.into_iter().take(cfg.top_k).map(|(w, _)| w),
        &cfg.stopwords,
    ))
}

/// Words of `base` that also occur in `target`; its size is the overlap count.
pub fn overlap<W: WordTypes + ?Sized>(base: &OverlapVocab, target: &W) -> OverlapVocab {
    OverlapVocab {
        words: base
            .words
            .iter()
            .filter(|w| target.contains_word(w))
            .cloned()
            .collect(),
    }
}

fn line_length(l: &CorpusLine, m: LengthMeasure) -> usize {
    match m {
        LengthMeasure::Tokens => l.tokens.len(),
        LengthMeasure::DistinctWords => l.word_types().len(),
    }
}

fn corpus_length(c: &Corpus, m: LengthMeasure) -> usize {
    match m {
        LengthMeasure::Tokens => c.token_count,
        LengthMeasure::DistinctWords => c.word_types().len(),
    }
}

/// `|W ∩ types(l)| / |W| − len(l) / len(c)` under the token measure.
pub fn score_line(l: &CorpusLine, w: &OverlapVocab, c: &Corpus) -> Result<f64, CurationError> {
    score_line_with(l, w, c, LengthMeasure::Tokens)
}

pub fn score_line_with(
    l: &CorpusLine,
    w: &OverlapVocab,
    c: &Corpus,
    measure: LengthMeasure,
) -> Result<f64, CurationError> {
    if w.is_empty() {
        return Err(CurationError::EmptyOverlap);
    }
    let total = corpus_length(c, measure);
    if total == 0 {
        return Err(CurationError::EmptyCorpus("scored corpus has no tokens"));
    }
    Ok(score_parts(
        overlap(w, l).size(),
        w.size(),
        line_length(l, measure),
        total,
    ))
}

/// Evaluated over a common denominator so the result carries a single rounding.
fn score_parts(hits: usize, vocab: usize, len: usize, total: usize) -> f64 {
    let num = hits as i128 * total as i128 - len as i128 * vocab as i128;
    let den = vocab as i128 * total as i128;
    num as f64 / den as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    TargetReached,
    MaxIterations,
    FixedPoint,
    /// An iteration after the first would have removed every line, or the
    /// overlap vocabulary vanished; the previous corpus is returned.
    Exhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub lines_in: usize,
    pub lines_out: usize,
    pub tokens_out: usize,
    pub overlap_size: usize,
    /// `(original_index, score)` for every retained line.
    pub retained: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iterations: Vec<IterationStats>,
    pub stop_reason: StopReason,
}

impl IterationReport {
    /// CSV body: `iteration,lines_in,lines_out,tokens_out,overlap_size`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lines_in,lines_out,tokens_out,overlap_size\n");
        for it in &self.iterations {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                it.iteration, it.lines_in, it.lines_out, it.tokens_out, it.overlap_size
            );
        }
        s
    }
}

/// One filtering pass: returns retained lines with their scores and `|W|`.
fn filter_once(
    current: &Corpus,
    target_vocab: &OverlapVocab,
    cfg: &CurationConfig,
) -> Result<(Vec<(CorpusLine, f64)>, usize, f64), CurationError> {
    let w = overlap(target_vocab, &current.word_types());
    if w.is_empty() {
        return Err(CurationError::EmptyOverlap);
    }
    let total = corpus_length(current, cfg.length_measure);
    if total == 0 {
        return Err(CurationError::EmptyCorpus("coarse corpus has no tokens"));
    }
    let mut max_score = f64::NEG_INFINITY;
    let mut kept = Vec::new();
    for line in &current.lines {
        let hits = w
            .words
            .iter()
            .filter(|word| line.contains_word(word))
            .count();
        let s = score_parts(hits, w.size(), line_length(line, cfg.length_measure), total);
        max_score = max_score.max(s);
        if s > cfg.delta {
            kept.push((line.clone(), s));
        }
    }
    Ok((kept, w.size(), max_score))
}

/// Iterative filtering of `coarse` towards the vocabulary of `target_text`.
pub fn curate(
    coarse: &Corpus,
    target_text: &Corpus,
    cfg: &CurationConfig,
) -> Result<(Corpus, IterationReport), CurationError> {
    cfg.validate()?;
    if coarse.is_empty() {
        return Err(CurationError::EmptyCorpus("coarse corpus"));
    }
    let target_vocab = top_frequent_vocab(target_text, cfg)?;
    let original = coarse.len();
    let mut current = coarse.clone();
    let mut iterations = Vec::new();

    let stop_reason = loop {
        let iteration = iterations.len() + 1;
        let (kept, overlap_size, max_score) = match filter_once(&current, &target_vocab, cfg) {
            Ok(r) => r,
            Err(CurationError::EmptyOverlap) if iteration > 1 => break StopReason::Exhausted,
            Err(e) => return Err(e),
        };
        if kept.is_empty() {
            if iteration == 1 {
                return Err(CurationError::ThresholdTooAggressive {
                    delta: cfg.delta,
                    max_score,
                });
            }
            break StopReason::Exhausted;
        }
        let lines_in = current.len();
        let retained = kept.iter().map(|(l, s)| (l.original_index, *s)).collect();
        let next = Corpus::from_lines(
            kept.into_iter().map(|(l, _)| l).collect(),
            current.source_id.clone(),
        );
        iterations.push(IterationStats {
            iteration,
            lines_in,
            lines_out: next.len(),
            tokens_out: next.token_count(),
            overlap_size,
            retained,
        });
        let unchanged = next.len() == lines_in;
        current = next;

        if let Some(frac) = cfg.target_fraction {
            if current.len() as f64 <= frac * original as f64 {
                break StopReason::TargetReached;
            }
        }
        if unchanged {
            break StopReason::FixedPoint;
        }
        if iteration >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
    };

    Ok((
        current,
        IterationReport {
            iterations,
            stop_reason,
        },
    ))
}
