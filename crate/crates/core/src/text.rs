//! Tokenization, option rewriting and model-input construction.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Default padded sequence length.
pub const MAX_SEQ_LEN: usize = 180;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TextError {
    #[error("question too long: {needed} tokens for question and option, limit {limit}")]
    QuestionTooLong { needed: usize, limit: usize },
    #[error("option index {index} out of range for {count} options")]
    OptionOutOfRange { index: usize, count: usize },
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("vocab file: {0}")]
    VocabFormat(String),
}

/// Lowercased alphanumeric runs of `text`.
pub fn word_pieces(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Special tokens, in file order; their ids are 0..5.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    frequencies: Vec<u64>,
    specials: SpecialIds,
}

impl Vocab {
    /// Special tokens followed by `words` in order; duplicates are skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            frequencies: Vec::new(),
            specials: SpecialIds {
                pad: 0,
                unk: 1,
                cls: 2,
                sep: 3,
                mask: 4,
            },
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string(), 0);
        }
        for w in words {
            v.push(w.into(), 0);
        }
        v
    }

    /// Vocabulary of every word in `texts` with count ≥ `min_count`, ordered by
    /// descending frequency then alphabetically, capped at `max_words`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: u64,
        max_words: usize,
    ) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for w in word_pieces(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_words);
        let mut v = Self::from_words(std::iter::empty::<String>());
        for (w, c) in ranked {
            v.push(w, c);
        }
        v
    }

    fn push(&mut self, tok: String, freq: u64) {
        if self.index.contains_key(&tok) {
            return;
        }
        self.index.insert(tok.clone(), self.tokens.len() as u32);
        self.tokens.push(tok);
        self.frequencies.push(freq);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies.get(id as usize).copied().unwrap_or(0)
    }

    /// Ids eligible as random replacements.
    pub fn regular_ids(&self) -> Range<u32> {
        SPECIAL_TOKENS.len() as u32..self.tokens.len() as u32
    }

    /// One token per line; line number is the id. The first five lines must be
    /// the special tokens in [`SPECIAL_TOKENS`] order.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() {
            return Err(TextError::VocabFormat(
                "missing special-token header".into(),
            ));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *s {
                return Err(TextError::VocabFormat(format!(
                    "line {} must be {s}, found `{}`",
                    i + 1,
                    lines[i]
                )));
            }
        }
        let mut v = Self::from_words(std::iter::empty::<String>());
        for (i, l) in lines.iter().enumerate().skip(SPECIAL_TOKENS.len()) {
            if l.is_empty() || v.index.contains_key(*l) {
                return Err(TextError::VocabFormat(format!(
                    "line {}: empty or duplicate token",
                    i + 1
                )));
            }
            v.push(l.to_string(), 0);
        }
        Ok(v)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }
}

/// Lowercased word pieces mapped through `vocab`, unknowns to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    word_pieces(text)
        .map(|w| vocab.id(&w).unwrap_or(vocab.specials.unk))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionType {
    TF,
    TMC,
    DMC,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default)]
    pub answer_index: Option<usize>,
    #[serde(default)]
    pub question_diagram: Option<String>,
    #[serde(default)]
    pub instructional_diagrams: Vec<String>,
    pub qtype: QuestionType,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<(), TextError> {
        let bad = |reason: String| TextError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(2..=7).contains(&self.options.len()) {
            return Err(bad(format!(
                "{} options, expected 2 to 7",
                self.options.len()
            )));
        }
        if let Some(a) = self.answer_index {
            if a >= self.options.len() {
                return Err(bad(format!("answer_index {a} out of range")));
            }
        }
        if self.qtype == QuestionType::DMC && self.question_diagram.is_none() {
            return Err(bad("DMC record without question_diagram".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub context: Range<usize>,
    pub question: Range<usize>,
    pub option: Range<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

/// `[CLS] context [SEP] question [SEP] option [SEP]` padded to `n_max`. The
/// context is truncated from its tail when the sequence would not fit.
pub fn build_input(
    record: &QuestionRecord,
    option_index: usize,
    vocab: &Vocab,
    n_max: usize,
) -> Result<TokenSeq, TextError> {
    let option = record
        .options
        .get(option_index)
        .ok_or(TextError::OptionOutOfRange {
            index: option_index,
            count: record.options.len(),
        })?;
    let q = tokenize(&record.question, vocab);
    let a = tokenize(option, vocab);
    let limit = n_max.saturating_sub(4);
    if q.len() + a.len() > limit {
        return Err(TextError::QuestionTooLong {
            needed: q.len() + a.len(),
            limit,
        });
    }
    let mut c = tokenize(&record.context, vocab);
    c.truncate(limit - q.len() - a.len());

    let sp = vocab.specials;
    let mut ids = Vec::with_capacity(n_max);
    ids.push(sp.cls);
    let context = ids.len()..ids.len() + c.len();
    ids.extend(c);
    ids.push(sp.sep);
    let question = ids.len()..ids.len() + q.len();
    ids.extend(q);
    ids.push(sp.sep);
    let option = ids.len()..ids.len() + a.len();
    ids.extend(a);
    ids.push(sp.sep);
    let real = ids.len();
    ids.resize(n_max, sp.pad);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(n_max, 0);
    Ok(TokenSeq {
        ids,
        attention_mask,
        context,
        question,
        option,
    })
}

/// Phrases marking latent semantic options.
#[derive(Clone, Debug)]
pub struct LsoPatterns {
    /// Options meaning "every other option".
    pub all: Vec<String>,
    /// Options meaning "no option".
    pub none: Vec<String>,
}

impl Default for LsoPatterns {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            all: s(&[
                "all of the above",
                "all of these",
                "all of them",
                "all the above",
                "all of the choices",
                "all of the answers",
                "all of the options",
                "all answers are correct",
            ]),
            none: s(&[
                "none of the above",
                "none of these",
                "none of them",
                "none of the choices",
                "none of the answers",
                "none of the options",
            ]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lso {
    All,
    None,
    Both(usize, usize),
    Neither,
}

fn pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(both|neither)\s+\(?([a-g]|[1-7])\)?\s*(and|nor|&)\s*\(?([a-g]|[1-7])\)?$")
            .unwrap()
    })
}

fn label_index(label: &str) -> usize {
    let c = label.as_bytes()[0];
    if c.is_ascii_digit() {
        (c - b'1') as usize
    } else {
        (c - b'a') as usize
    }
}

fn canonical(option: &str) -> String {
    option
        .trim()
        .trim_end_matches(['.', '!', '?', ' '])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl LsoPatterns {
    fn classify(&self, option: &str) -> Option<Lso> {
        let c = canonical(option);
        if self.all.contains(&c) {
            return Some(Lso::All);
        }
        if self.none.iter().any(|p| *p == c) {
            return Some(Lso::None);
        }
        let caps = pair_regex().captures(&c)?;
        match (&caps[1], &caps[3]) {
            ("both", "and" | "&") => Some(Lso::Both(label_index(&caps[2]), label_index(&caps[4]))),
            ("neither", "nor") => Some(Lso::Neither),
            _ => None,
        }
    }

    /// Rewrites latent semantic options; returns the new options and any
    /// warnings about references that could not be resolved.
    ///
    /// Passes repeat until nothing changes, so a "both" option that points at
    /// another latent option picks up that option's rewritten text.
    pub fn rewrite(&self, options: &[String]) -> (Vec<String>, Vec<String>) {
        let mut current = options.to_vec();
        loop {
            let (next, warnings) = self.rewrite_once(&current);
            if next == current {
                return (next, warnings);
            }
            current = next;
        }
    }

    fn rewrite_once(&self, options: &[String]) -> (Vec<String>, Vec<String>) {
        let kinds: Vec<Option<Lso>> = options.iter().map(|o| self.classify(o)).collect();
        let mut warnings = Vec::new();
        let out = options
            .iter()
            .zip(&kinds)
            .enumerate()
            .map(|(i, (opt, kind))| match kind {
                None => opt.clone(),
                Some(Lso::None | Lso::Neither) => String::new(),
                Some(Lso::All) => options
                    .iter()
                    .zip(&kinds)
                    .enumerate()
                    .filter(|(j, (_, k))| *j != i && k.is_none())
                    .map(|(_, (o, _))| o.as_str())
                    .collect::<Vec<_>>()
                    .join("; "),
                Some(Lso::Both(a, b)) => {
                    let ok = |x: usize| x < options.len() && x != i && kinds[x].is_none();
                    if ok(*a) && ok(*b) {
                        format!("{}; {}", options[*a], options[*b])
                    } else {
                        warnings.push(format!(
                            "option {i} `{opt}` references an unusable option; left unchanged"
                        ));
                        opt.clone()
                    }
                }
            })
            .collect();
        (out, warnings)
    }
}

/// [`LsoPatterns::rewrite`] with the default patterns; warnings go to the log.
pub fn normalize_lso(options: &[String]) -> Vec<String> {
    static DEFAULT: OnceLock<LsoPatterns> = OnceLock::new();
    let (out, warnings) = DEFAULT.get_or_init(LsoPatterns::default).rewrite(options);
    for w in warnings {
        log::warn!("{w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn record(context: &str, question: &str, options: &[&str]) -> QuestionRecord {
        QuestionRecord {
            id: "r".into(),
            context: context.into(),
            question: question.into(),
            options: opts(options),
            answer_index: None,
            question_diagram: None,
            instructional_diagrams: vec![],
            qtype: QuestionType::TMC,
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::from_words(["benthic", "zone"]);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(
            tokenize("Benthic zone", &v),
            [v.id("benthic").unwrap(), v.id("zone").unwrap()]
        );
        assert_eq!(tokenize("abyssal", &v), [v.specials().unk]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_words(["cell", "wall"]);
        let parsed = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(parsed.id("wall"), Some(6));
        assert_eq!(parsed.specials(), v.specials());
        assert!(Vocab::parse("[PAD]\n[UNK]\n").is_err());
        assert!(Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\nx\n").is_err());
    }

    #[test]
    fn lso_goldens() {
        assert_eq!(
            normalize_lso(&opts(&["red", "blue", "all of the above"])),
            ["red", "blue", "red; blue"]
        );
        assert_eq!(
            normalize_lso(&opts(&["red", "blue", "none of these"])),
            ["red", "blue", ""]
        );
        assert_eq!(
            normalize_lso(&opts(&["w", "x", "y", "both a and b"])),
            ["w", "x", "y", "w; x"]
        );
    }

    #[test]
    fn lso_variants() {
        assert_eq!(
            normalize_lso(&opts(&["w", "x", "y", "Both (a) and (c)."])),
            ["w", "x", "y", "w; y"]
        );
        assert_eq!(
            normalize_lso(&opts(&["w", "x", "y", "both 1 & 2"])),
            ["w", "x", "y", "w; x"]
        );
        assert_eq!(
            normalize_lso(&opts(&["w", "x", "neither a nor b"])),
            ["w", "x", ""]
        );
        assert_eq!(
            normalize_lso(&opts(&["w", "x", "All Of These"])),
            ["w", "x", "w; x"]
        );
    }

    #[test]
    fn both_out_of_range_is_left_unchanged() {
        let (out, warnings) = LsoPatterns::default().rewrite(&opts(&["w", "x", "both a and f"]));
        assert_eq!(out, ["w", "x", "both a and f"]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn both_referencing_itself_is_left_unchanged() {
        let (out, warnings) = LsoPatterns::default().rewrite(&opts(&["w", "both a and b"]));
        assert_eq!(out, ["w", "both a and b"]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn true_false_passes_through() {
        assert_eq!(normalize_lso(&opts(&["true", "false"])), ["true", "false"]);
    }

    #[test]
    fn all_skips_other_lso_options() {
        let out = normalize_lso(&opts(&[
            "a1",
            "b1",
            "all of the above",
            "none of the above",
        ]));
        assert_eq!(out, ["a1", "b1", "a1; b1", ""]);
    }

    #[test]
    fn build_input_empty_context() {
        let v = Vocab::from_words(["what", "is", "sun", "star"]);
        let r = record("", "what is sun", &["star", "moon"]);
        let s = build_input(&r, 0, &v, MAX_SEQ_LEN).unwrap();
        let sp = v.specials();
        assert_eq!(s.len(), 180);
        assert_eq!(&s.ids[..8], &[sp.cls, sp.sep, 5, 6, 7, sp.sep, 8, sp.sep]);
        assert!(s.ids[8..].iter().all(|&i| i == sp.pad));
        assert_eq!(s.real_len(), 8);
        assert!(s.context.is_empty());
    }

    #[test]
    fn build_input_pads_after_fifty_tokens() {
        let v = Vocab::from_words(["w"]);
        let ctx = vec!["w"; 44].join(" ");
        let r = record(&ctx, "w", &["w", "w"]);
        let s = build_input(&r, 1, &v, 180).unwrap();
        assert_eq!(s.real_len(), 50);
        assert!(s.attention_mask[50..].iter().all(|&m| m == 0));
        assert!(s.ids[50..].iter().all(|&i| i == v.specials().pad));
    }

    #[test]
    fn build_input_truncates_context_first() {
        let v = Vocab::from_words(["c", "q", "a"]);
        let ctx = vec!["c"; 500].join(" ");
        let r = record(&ctx, "q q q", &["a a", "a"]);
        let s = build_input(&r, 0, &v, 180).unwrap();
        // length accounting: 180 = 1 + ctx + 1 + 3 + 1 + 2 + 1
        assert_eq!(s.real_len(), 180);
        assert_eq!(s.context.len(), 180 - 4 - 3 - 2);
        assert_eq!(s.question.len(), 3);
        assert_eq!(s.option.len(), 2);
    }

    #[test]
    fn build_input_rejects_long_question() {
        let v = Vocab::from_words(["q"]);
        let r = record("", &vec!["q"; 177].join(" "), &["q", "q"]);
        assert!(matches!(
            build_input(&r, 0, &v, 180),
            Err(TextError::QuestionTooLong { .. })
        ));
        assert!(matches!(
            build_input(&r, 5, &v, 180),
            Err(TextError::OptionOutOfRange { .. })
        ));
    }

    #[test]
    fn record_validation() {
        let mut r = record("", "q", &["a"]);
        assert!(r.validate().is_err());
        r.options = opts(&["a", "b"]);
        r.answer_index = Some(2);
        assert!(r.validate().is_err());
        r.answer_index = Some(1);
        r.qtype = QuestionType::DMC;
        assert!(r.validate().is_err());
        r.question_diagram = Some("qd.png".into());
        assert!(r.validate().is_ok());
    }

    #[test]
    fn record_json_field_names() {
        let r = record("ctx", "q", &["a", "b"]);
        let js = serde_json::to_string(&r).unwrap();
        for f in [
            "\"id\"",
            "\"context\"",
            "\"question\"",
            "\"options\"",
            "\"answer_index\"",
            "\"question_diagram\"",
            "\"instructional_diagrams\"",
            "\"qtype\":\"TMC\"",
        ] {
            assert!(js.contains(f), "{js}");
        }
    }

    fn option_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-z]{1,8}( [a-z]{1,8}){0,2}",
            Just("all of the above".to_string()),
            Just("None of these".to_string()),
            Just("both a and b".to_string()),
            Just("both (b) and (d)".to_string()),
            Just("neither a nor c".to_string()),
            Just("".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn lso_is_idempotent_and_length_preserving(options in proptest::collection::vec(option_strategy(), 2..8)) {
            let once = normalize_lso(&options);
            prop_assert_eq!(once.len(), options.len());
            prop_assert_eq!(normalize_lso(&once), once);
        }

        #[test]
        fn build_input_is_always_full_length(ctx_len in 0usize..400, q_len in 1usize..60, a_len in 1usize..60) {
            let v = Vocab::from_words(["c", "q", "a"]);
            let r = record(&vec!["c"; ctx_len].join(" "), &vec!["q"; q_len].join(" "), &[&vec!["a"; a_len].join(" "), "a"]);
            let s = build_input(&r, 0, &v, 180).unwrap();
            prop_assert_eq!(s.ids.len(), 180);
            prop_assert_eq!(s.ids[0], v.specials().cls);
            let real = &s.ids[..s.real_len()];
            prop_assert_eq!(real.iter().filter(|&&i| i == v.specials().sep).count(), 3);
            let decoded: Vec<&str> = real.iter().filter(|&&i| !v.is_special(i)).map(|&i| v.token(i).unwrap()).collect();
            let mut expected = vec!["c"; ctx_len.min(176 - q_len - a_len)];
            expected.extend(vec!["q"; q_len]);
            expected.extend(vec!["a"; a_len]);
            prop_assert_eq!(decoded, expected);
        }
    }
}
