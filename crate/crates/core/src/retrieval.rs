//! Background-sentence retrieval for the three ensemble channels.
//!
//! `IR` ranks sentences by TF-IDF cosine against question and option text.
//! `NSP` and `NN` are lexical stand-ins for the neural retrievers: `NSP` uses
//! the question alone, `NN` a hashed bag-of-words embedding.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::default_stopwords;
use crate::text::word_pieces;

/// Default token budget for retrieved context.
pub const DEFAULT_CONTEXT_BUDGET: usize = 130;

const HASH_DIM: usize = 256;

const ABBREVIATIONS: &[&str] = &[
    "fig", "figs", "eq", "eqs", "e.g", "i.e", "etc", "vs", "dr", "mr", "mrs", "ms", "prof", "st",
    "no", "approx", "ca", "cf", "al", "inc", "ltd", "jr", "sr", "vol", "pp", "ch", "sec", "mt",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("token budget must be >= 1")]
    ZeroBudget,
    #[error("unknown strategy `{0}` (expected ir, nsp or nn)")]
    UnknownStrategy(String),
}

/// The three retrieval channels, in ensemble order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RetrievalStrategy {
    IR,
    NSP,
    NN,
}

impl RetrievalStrategy {
    pub const ALL: [RetrievalStrategy; 3] = [Self::IR, Self::NSP, Self::NN];

    /// Query text the strategy ranks against.
    pub fn query(self, question: &str, option: &str) -> String {
        match self {
            Self::NSP => question.to_string(),
            Self::IR | Self::NN => format!("{question} {option}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::IR => "IR",
            Self::NSP => "NSP",
            Self::NN => "NN",
        }
    }
}

impl std::str::FromStr for RetrievalStrategy {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ir" => Ok(Self::IR),
            "nsp" => Ok(Self::NSP),
            "nn" => Ok(Self::NN),
            _ => Err(RetrievalError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub text: String,
    pub score: f64,
    /// Position in the lesson.
    pub index: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub sentences: Vec<ScoredSentence>,
    pub token_budget: usize,
}

impl RankedContext {
    pub fn total_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens).sum()
    }

    /// Retained sentences joined in rank order.
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token count used for budgeting; same word boundaries as the tokenizer.
pub fn token_count(text: &str) -> usize {
    word_pieces(text).count()
}

fn is_guarded(prefix: &str) -> bool {
    let word = prefix
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .trim_end_matches('.')
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Splits after `.`, `!` or `?` when followed by whitespace, except after
/// common abbreviations such as "Fig.".
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let Some(&(_, next)) = chars.get(k + 1) else {
            continue;
        };
        if !next.is_whitespace() {
            continue;
        }
        if c == '.' && is_guarded(&text[start..i]) {
            continue;
        }
        let end = i + c.len_utf8();
        let s = text[start..end].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        start = end;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn content_terms(text: &str) -> Vec<String> {
    let stop = default_stopwords();
    word_pieces(text).filter(|w| !stop.contains(w)).collect()
}

fn term_counts(terms: &[String]) -> BTreeMap<&str, f64> {
    let mut m = BTreeMap::new();
    for t in terms {
        *m.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    m
}

/// Per-lesson index shared by all strategies.
pub struct LessonIndex {
    sentences: Vec<String>,
    terms: Vec<Vec<String>>,
    idf: HashMap<String, f64>,
    docs: usize,
}

impl LessonIndex {
    pub fn new(lesson_text: &str) -> Self {
        let sentences = split_sentences(lesson_text);
        let terms: Vec<Vec<String>> = sentences.iter().map(|s| content_terms(s)).collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for t in &terms {
            for w in t.iter().collect::<HashSet<_>>() {
                *df.entry(w.clone()).or_default() += 1;
            }
        }
        let docs = sentences.len();
        let idf = df
            .into_iter()
            .map(|(w, d)| (w, smooth_idf(docs, d)))
            .collect();
        Self {
            sentences,
            terms,
            idf,
            docs,
        }
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    fn idf(&self, term: &str) -> f64 {
        self.idf
            .get(term)
            .copied()
            .unwrap_or_else(|| smooth_idf(self.docs, 0))
    }

    fn tfidf<'a>(&self, terms: &'a [String]) -> BTreeMap<&'a str, f64> {
        let mut v = term_counts(terms);
        for (t, w) in v.iter_mut() {
            *w *= self.idf(t);
        }
        v
    }

    /// Relevance of every sentence to `query` under `strategy`.
    pub fn scores(&self, query: &str, strategy: RetrievalStrategy) -> Vec<f64> {
        let q = content_terms(query);
        match strategy {
            RetrievalStrategy::IR | RetrievalStrategy::NSP => {
                let qv = self.tfidf(&q);
                self.terms
                    .iter()
                    .map(|s| sparse_cosine(&qv, &self.tfidf(s)))
                    .collect()
            }
            RetrievalStrategy::NN => {
                let qv = hashed_embedding(&q);
                self.terms
                    .iter()
                    .map(|s| dense_cosine(&qv, &hashed_embedding(s)))
                    .collect()
            }
        }
    }

    pub fn retrieve(
        &self,
        query: &str,
        strategy: RetrievalStrategy,
        budget: usize,
    ) -> Result<RankedContext, RetrievalError> {
        if budget == 0 {
            return Err(RetrievalError::ZeroBudget);
        }
        let scores = self.scores(query, strategy);
        let mut order: Vec<usize> = (0..self.sentences.len()).collect();
        // stable sort keeps document order among ties
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut used = 0;
        let mut sentences = Vec::new();
        for i in order {
            let tokens = token_count(&self.sentences[i]);
            if used + tokens > budget {
                break;
            }
            used += tokens;
            sentences.push(ScoredSentence {
                text: self.sentences[i].clone(),
                score: scores[i],
                index: i,
                tokens,
            });
        }
        Ok(RankedContext {
            sentences,
            token_budget: budget,
        })
    }
}

fn smooth_idf(docs: usize, df: usize) -> f64 {
    ((1.0 + docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn sparse_cosine(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Signed feature hashing of terms into a fixed-width vector.
pub fn hashed_embedding(terms: &[String]) -> Vec<f64> {
    let mut v = vec![0.0; HASH_DIM];
    for t in terms {
        let h = fnv1a(t);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % HASH_DIM as u64) as usize] += sign;
    }
    v
}

fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ranks the sentences of `lesson_text` for `query` and keeps the best ones
/// while they fit in `budget` tokens.
pub fn retrieve(
    query: &str,
    lesson_text: &str,
    strategy: RetrievalStrategy,
    budget: usize,
) -> Result<RankedContext, RetrievalError> {
    LessonIndex::new(lesson_text).retrieve(query, strategy, budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A. B!"), ["A.", "B!"]);
        assert_eq!(
            split_sentences("no terminal punctuation here"),
            ["no terminal punctuation here"]
        );
        assert_eq!(split_sentences("Fig. 3 shows X."), ["Fig. 3 shows X."]);
        assert_eq!(
            split_sentences("See (fig. 2) now. Then stop?  Yes"),
            ["See (fig. 2) now.", "Then stop?", "Yes"]
        );
        assert!(split_sentences("   ").is_empty());
        assert_eq!(
            split_sentences("Value 3.5 is big. Ok."),
            ["Value 3.5 is big.", "Ok."]
        );
    }

    #[test]
    fn unique_query_word_ranks_first() {
        let lesson = "Plants make food. Animals eat plants. The benthic zone is deep. Fish swim.";
        let ctx = retrieve("benthic", lesson, RetrievalStrategy::IR, 100).unwrap();
        assert_eq!(ctx.sentences[0].text, "The benthic zone is deep.");
    }

    #[test]
    fn tiny_budget_keeps_at_most_a_short_sentence() {
        let lesson = "Plants make food. Go. Animals eat plants.";
        let ctx = retrieve("plants", lesson, RetrievalStrategy::IR, 1).unwrap();
        assert!(ctx.total_tokens() <= 1);
        assert!(ctx.sentences.len() <= 1);
    }

    #[test]
    fn empty_lesson_gives_empty_context() {
        let ctx = retrieve("anything", "", RetrievalStrategy::NN, 10).unwrap();
        assert!(ctx.sentences.is_empty());
        assert_eq!(
            retrieve("x", "y", RetrievalStrategy::IR, 0),
            Err(RetrievalError::ZeroBudget)
        );
    }

    #[test]
    fn ties_keep_document_order() {
        let lesson = "Rocks erode. Water flows. Wind blows.";
        let ctx = retrieve("volcano", lesson, RetrievalStrategy::IR, 100).unwrap();
        let idx: Vec<usize> = ctx.sentences.iter().map(|s| s.index).collect();
        assert_eq!(idx, [0, 1, 2]);
    }

    #[test]
    fn nsp_ignores_option_text() {
        assert_eq!(RetrievalStrategy::NSP.query("q text", "opt"), "q text");
        assert_eq!(RetrievalStrategy::IR.query("q text", "opt"), "q text opt");
    }

    #[test]
    fn nn_prefers_overlapping_sentence() {
        let lesson = "Magma rises through the crust. Leaves fall in autumn.";
        let ctx = retrieve("magma crust", lesson, RetrievalStrategy::NN, 100).unwrap();
        assert_eq!(ctx.sentences[0].index, 0);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(
            "nsp".parse::<RetrievalStrategy>().unwrap(),
            RetrievalStrategy::NSP
        );
        assert!("bm25".parse::<RetrievalStrategy>().is_err());
    }
}
