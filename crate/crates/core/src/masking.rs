//! Span-masked pretraining examples.
//!
//! Spans are drawn with truncated-geometric lengths until the masked share of
//! the maskable positions reaches the budget; each masked position is then
//! replaced by `[MASK]`, a random token or itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::Vocab;

/// Label value at positions that were not masked.
pub const IGNORE_LABEL: i64 = -100;

const START_ATTEMPTS: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("nothing maskable: sequence contains only special tokens")]
    NothingMaskable,
    #[error("whole-word masking needs word boundaries")]
    MissingWordBoundaries,
    #[error("word boundaries do not partition the maskable positions: {0}")]
    BadWordBoundaries(String),
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Span,
    Random,
    #[serde(alias = "whole_word")]
    WholeWord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub mode: MaskMode,
    pub budget: f64,
    pub geo_p: f64,
    pub max_span: usize,
    pub proportions: Proportions,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mode: MaskMode::Span,
            budget: 0.15,
            geo_p: 0.2,
            max_span: 10,
            proportions: Proportions {
                mask: 0.8,
                random: 0.1,
                keep: 0.1,
            },
        }
    }
}

impl MaskPolicy {
    pub fn with_mode(mode: MaskMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let bad = |s: String| Err(MaskError::InvalidPolicy(s));
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return bad(format!("budget {} outside (0, 1)", self.budget));
        }
        if !(self.geo_p > 0.0 && self.geo_p <= 1.0) {
            return bad(format!("geo_p {} outside (0, 1]", self.geo_p));
        }
        if self.max_span == 0 {
            return bad("max_span must be >= 1".into());
        }
        let p = self.proportions;
        if [p.mask, p.random, p.keep].iter().any(|v| *v < 0.0)
            || (p.mask + p.random + p.keep - 1.0).abs() > 1e-9
        {
            return bad("replacement proportions must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    /// Truncated geometric pmf on `1..=max_span`.
    pub fn span_pmf(&self) -> Vec<f64> {
        let q = 1.0 - self.geo_p;
        let z = 1.0 - q.powi(self.max_span as i32);
        (1..=self.max_span)
            .map(|k| self.geo_p * q.powi(k as i32 - 1) / z)
            .collect()
    }
}

/// `(start, length)` of a masked run; serialized as `[start, length]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.len)
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, len): (usize, usize)) -> Self {
        Self { start, len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub spans: Vec<Span>,
    pub seed: u64,
}

impl MaskedExample {
    pub fn masked_count(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    /// Input ids with the labels written back over every span.
    pub fn reconstruct(&self) -> Vec<u32> {
        self.input_ids
            .iter()
            .zip(&self.labels)
            .map(|(&id, &l)| if l == IGNORE_LABEL { id } else { l as u32 })
            .collect()
    }
}

/// Draws a span length from the truncated geometric distribution by inverse CDF.
pub fn sample_span_length<R: Rng + ?Sized>(rng: &mut R, policy: &MaskPolicy) -> usize {
    if policy.geo_p >= 1.0 || policy.max_span == 1 {
        return 1;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in policy.span_pmf().iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    policy.max_span
}

fn is_special(vocab: &Vocab, id: u32) -> bool {
    let sp = vocab.specials();
    id == sp.cls || id == sp.sep || id == sp.pad
}

/// Masks `tokens` according to `policy`. `words` is required in whole-word
/// mode and ignored otherwise.
pub fn mask_sequence(
    tokens: &[u32],
    words: Option<&[Span]>,
    vocab: &Vocab,
    policy: &MaskPolicy,
    seed: u64,
) -> Result<MaskedExample, MaskError> {
    policy.validate()?;
    let maskable: Vec<bool> = tokens.iter().map(|&t| !is_special(vocab, t)).collect();
    let n = maskable.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(MaskError::NothingMaskable);
    }
    let target = (policy.budget * n as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let spans = match policy.mode {
        MaskMode::WholeWord => {
            let words = words.ok_or(MaskError::MissingWordBoundaries)?;
            whole_word_spans_with(&maskable, words, target, &mut rng)?
        }
        MaskMode::Span | MaskMode::Random => sample_spans(&maskable, target, policy, &mut rng),
    };

    let regular = vocab.regular_ids();
    let mut input_ids = tokens.to_vec();
    let mut labels = vec![IGNORE_LABEL; tokens.len()];
    let mut positions: Vec<usize> = spans.iter().flat_map(|s| s.start..s.end()).collect();
    positions.sort_unstable();
    let p = policy.proportions;
    for pos in positions {
        labels[pos] = tokens[pos] as i64;
        let u: f64 = rng.random();
        if u < p.mask {
            input_ids[pos] = vocab.specials().mask;
        } else if u < p.mask + p.random && !regular.is_empty() {
            input_ids[pos] = rng.random_range(regular.clone());
        }
    }
    Ok(MaskedExample {
        input_ids,
        labels,
        spans,
        seed,
    })
}

fn sample_spans<R: Rng>(
    maskable: &[bool],
    target: usize,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Vec<Span> {
    let len = maskable.len();
    let mut taken = vec![false; len];
    let mut masked = 0;
    let mut spans = Vec::new();
    let free = |taken: &[bool], i: usize| maskable[i] && !taken[i];

    while masked < target {
        let candidates: Vec<usize> = (0..len).filter(|&i| free(&taken, i)).collect();
        if candidates.is_empty() {
            break;
        }
        let span_len = match policy.mode {
            MaskMode::Random => 1,
            _ => sample_span_length(rng, policy),
        };
        let mut chosen = None;
        for _ in 0..START_ATTEMPTS {
            let start = candidates[rng.random_range(0..candidates.len())];
            let end = (start + span_len).min(len);
            if (start..end).all(|i| free(&taken, i)) {
                chosen = Some(Span {
                    start,
                    len: end - start,
                });
                break;
            }
            chosen = Some(Span {
                start,
                len: (start..end).take_while(|&i| free(&taken, i)).count(),
            });
        }
        let span = chosen.expect("at least one attempt");
        for i in span.start..span.end() {
            taken[i] = true;
        }
        masked += span.len;
        spans.push(span);
    }
    spans.sort_by_key(|s| s.start);
    spans
}

/// Selects whole words uniformly at random until at least `target` positions
/// are covered.
pub fn whole_word_spans(
    tokens: &[u32],
    words: &[Span],
    vocab: &Vocab,
    budget: f64,
    seed: u64,
) -> Result<Vec<Span>, MaskError> {
    let maskable: Vec<bool> = tokens.iter().map(|&t| !is_special(vocab, t)).collect();
    let n = maskable.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(MaskError::NothingMaskable);
    }
    let target = (budget * n as f64).ceil() as usize;
    whole_word_spans_with(
        &maskable,
        words,
        target,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn whole_word_spans_with<R: Rng>(
    maskable: &[bool],
    words: &[Span],
    target: usize,
    rng: &mut R,
) -> Result<Vec<Span>, MaskError> {
    let mut cover = vec![false; maskable.len()];
    for w in words {
        if w.len == 0 || w.end() > maskable.len() {
            return Err(MaskError::BadWordBoundaries(format!(
                "word {w:?} out of bounds"
            )));
        }
        for i in w.start..w.end() {
            if !maskable[i] {
                return Err(MaskError::BadWordBoundaries(format!(
                    "word {w:?} covers a special token"
                )));
            }
            if cover[i] {
                return Err(MaskError::BadWordBoundaries(format!(
                    "word {w:?} overlaps another word"
                )));
            }
            cover[i] = true;
        }
    }
    if let Some(i) = (0..maskable.len()).find(|&i| maskable[i] && !cover[i]) {
        return Err(MaskError::BadWordBoundaries(format!(
            "position {i} belongs to no word"
        )));
    }

    let mut remaining: Vec<Span> = words.to_vec();
    let mut masked = 0;
    let mut spans = Vec::new();
    while masked < target && !remaining.is_empty() {
        let w = remaining.swap_remove(rng.random_range(0..remaining.len()));
        masked += w.len;
        spans.push(w);
    }
    spans.sort_by_key(|s| s.start);
    Ok(spans)
}

/// Aggregate counts over many masked examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskStats {
    pub sequences: usize,
    pub maskable: usize,
    pub masked: usize,
    pub shown_mask: usize,
    pub shown_random: usize,
    pub shown_original: usize,
    /// Index `k` counts spans of length `k + 1`.
    pub span_lengths: Vec<usize>,
}

impl MaskStats {
    pub fn add(&mut self, original: &[u32], ex: &MaskedExample, vocab: &Vocab) {
        self.sequences += 1;
        self.maskable += original.iter().filter(|&&t| !is_special(vocab, t)).count();
        for s in &ex.spans {
            if self.span_lengths.len() < s.len {
                self.span_lengths.resize(s.len, 0);
            }
            self.span_lengths[s.len - 1] += 1;
            for i in s.start..s.end() {
                self.masked += 1;
                if ex.input_ids[i] == vocab.specials().mask {
                    self.shown_mask += 1;
                } else if ex.input_ids[i] == original[i] {
                    self.shown_original += 1;
                } else {
                    self.shown_random += 1;
                }
            }
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked as f64 / self.maskable.max(1) as f64
    }

    pub fn replacement_mix(&self) -> (f64, f64, f64) {
        let m = self.masked.max(1) as f64;
        (
            self.shown_mask as f64 / m,
            self.shown_random as f64 / m,
            self.shown_original as f64 / m,
        )
    }

    pub fn span_pmf(&self) -> Vec<f64> {
        let total: usize = self.span_lengths.iter().sum();
        self.span_lengths
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect()
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let (m, r, k) = self.replacement_mix();
        let mut s = format!(
            "metric,value\nsequences,{}\nmaskable,{}\nmasked,{}\nmasked_fraction,{:.6}\nmask_share,{m:.6}\nrandom_share,{r:.6}\nkeep_share,{k:.6}\n",
            self.sequences,
            self.maskable,
            self.masked,
            self.masked_fraction()
        );
        for (i, p) in self.span_pmf().iter().enumerate() {
            s.push_str(&format!("span_len_{},{p:.6}\n", i + 1));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> Vocab {
        Vocab::from_words((0..n).map(|i| format!("w{i}")))
    }

    fn seq(n: usize, vocab: &Vocab) -> Vec<u32> {
        let r = vocab.regular_ids();
        (0..n)
            .map(|i| r.start + (i as u32 % (r.end - r.start)))
            .collect()
    }

    #[test]
    fn degenerate_geometric_is_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MaskPolicy {
            geo_p: 1.0,
            ..MaskPolicy::default()
        };
        assert!((0..1000).all(|_| sample_span_length(&mut rng, &p) == 1));
        let p = MaskPolicy {
            geo_p: 0.999_999,
            ..MaskPolicy::default()
        };
        assert!((0..1000).all(|_| sample_span_length(&mut rng, &p) == 1));
    }

    #[test]
    fn span_lengths_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MaskPolicy::default();
        assert!((0..10_000)
            .map(|_| sample_span_length(&mut rng, &p))
            .all(|k| (1..=10).contains(&k)));
    }

    #[test]
    fn pmf_sums_to_one_and_mean_matches() {
        let pmf = MaskPolicy::default().span_pmf();
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = pmf
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum();
        // 1/p - n q^n / (1 - q^n)
        let qn = 0.8f64.powi(10);
        assert!(
            (mean - (5.0 - 10.0 * qn / (1.0 - qn))).abs() < 1e-12,
            "{mean}"
        );
    }

    #[test]
    fn hundred_tokens_masks_between_fifteen_and_twenty_five() {
        let v = vocab(50);
        let s = seq(100, &v);
        for seed in 0..200 {
            let ex = mask_sequence(&s, None, &v, &MaskPolicy::default(), seed).unwrap();
            let m = ex.masked_count();
            assert!((15..25).contains(&m), "seed {seed}: {m}");
        }
    }

    #[test]
    fn random_mode_uses_single_tokens() {
        let v = vocab(50);
        let s = seq(120, &v);
        let ex = mask_sequence(&s, None, &v, &MaskPolicy::with_mode(MaskMode::Random), 9).unwrap();
        assert!(ex.spans.iter().all(|sp| sp.len == 1));
        assert_eq!(ex.masked_count(), 18);
    }

    #[test]
    fn only_specials_is_an_error() {
        let v = vocab(5);
        let sp = v.specials();
        let s = [sp.cls, sp.sep, sp.pad];
        assert_eq!(
            mask_sequence(&s, None, &v, &MaskPolicy::default(), 0),
            Err(MaskError::NothingMaskable)
        );
    }

    #[test]
    fn whole_word_needs_boundaries() {
        let v = vocab(5);
        let s = seq(10, &v);
        let p = MaskPolicy::with_mode(MaskMode::WholeWord);
        assert_eq!(
            mask_sequence(&s, None, &v, &p, 0),
            Err(MaskError::MissingWordBoundaries)
        );
    }

    #[test]
    fn whole_word_single_three_token_word() {
        let v = vocab(5);
        let s = seq(3, &v);
        let words = [Span { start: 0, len: 3 }];
        let spans = whole_word_spans(&s, &words, &v, 0.15, 4).unwrap();
        assert_eq!(spans, words);
    }

    #[test]
    fn whole_word_rejects_bad_partition() {
        let v = vocab(5);
        let s = seq(4, &v);
        assert!(whole_word_spans(&s, &[Span { start: 0, len: 2 }], &v, 0.15, 0).is_err());
        assert!(whole_word_spans(
            &s,
            &[Span { start: 0, len: 3 }, Span { start: 2, len: 2 }],
            &v,
            0.15,
            0
        )
        .is_err());
    }

    #[test]
    fn whole_word_budget_recount() {
        let v = vocab(30);
        let s = seq(90, &v);
        // words of lengths 1, 2, 3 repeating
        let mut words = Vec::new();
        let mut pos = 0;
        let mut k = 1;
        while pos < 90 {
            let len = k.min(90 - pos);
            words.push(Span { start: pos, len });
            pos += len;
            k = k % 3 + 1;
        }
        for seed in 0..50 {
            let ex = mask_sequence(
                &s,
                Some(&words),
                &v,
                &MaskPolicy::with_mode(MaskMode::WholeWord),
                seed,
            )
            .unwrap();
            let recount = ex.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
            assert_eq!(recount, ex.masked_count());
            assert!(recount >= 14 && recount < 14 + 3);
            for sp in &ex.spans {
                assert!(words.contains(sp));
            }
        }
    }

    #[test]
    fn whole_word_with_singleton_words_matches_random_mode_size() {
        let v = vocab(30);
        let s = seq(60, &v);
        let words: Vec<Span> = (0..60).map(|i| Span { start: i, len: 1 }).collect();
        let ex = mask_sequence(
            &s,
            Some(&words),
            &v,
            &MaskPolicy::with_mode(MaskMode::WholeWord),
            3,
        )
        .unwrap();
        assert!(ex.spans.iter().all(|sp| sp.len == 1));
        assert_eq!(ex.masked_count(), 9);
    }

    #[test]
    fn stats_csv_lists_span_pmf() {
        let v = vocab(40);
        let s = seq(100, &v);
        let mut st = MaskStats::default();
        for seed in 0..20 {
            st.add(
                &s,
                &mask_sequence(&s, None, &v, &MaskPolicy::default(), seed).unwrap(),
                &v,
            );
        }
        let csv = st.to_csv();
        assert!(csv.starts_with("metric,value\nsequences,20\n"));
        assert!(csv.contains("span_len_1,"));
    }

    fn seq_with_specials() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(prop_oneof![8 => 5u32..60, 1 => 0u32..4], 1..150)
    }

    proptest! {
        #[test]
        fn masked_example_invariants(tokens in seq_with_specials(), seed in any::<u64>(), mode in 0usize..2) {
            let v = vocab(55);
            let policy = MaskPolicy::with_mode([MaskMode::Span, MaskMode::Random][mode]);
            match mask_sequence(&tokens, None, &v, &policy, seed) {
                Err(MaskError::NothingMaskable) => {
                    prop_assert!(tokens.iter().all(|&t| is_special(&v, t)));
                }
                Err(e) => prop_assert!(false, "{e}"),
                Ok(ex) => {
                    prop_assert_eq!(ex.reconstruct(), tokens.clone());
                    let mut covered = vec![false; tokens.len()];
                    for sp in &ex.spans {
                        prop_assert!(sp.len >= 1 && sp.end() <= tokens.len());
                        for i in sp.start..sp.end() {
                            prop_assert!(!covered[i]);
                            covered[i] = true;
                            prop_assert!(!is_special(&v, tokens[i]));
                        }
                    }
                    for i in 0..tokens.len() {
                        prop_assert_eq!(ex.labels[i] != IGNORE_LABEL, covered[i]);
                        if !covered[i] {
                            prop_assert_eq!(ex.input_ids[i], tokens[i]);
                        }
                    }
                    let again = mask_sequence(&tokens, None, &v, &policy, seed).unwrap();
                    prop_assert_eq!(again, ex);
                }
            }
        }
    }
}
