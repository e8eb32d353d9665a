//! Desk-scale training: span-masked language modelling and multiple-choice
//! fine-tuning with plain SGD, plus the synthetic corpora they run on.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgma::{encode_text, CgmaError, ParamInit, SyntheticDiagrams};
use crate::gme::{argmax, EnsembleWeights, GmeError, Pipeline};
use crate::masking::{mask_sequence, MaskError, MaskPolicy, MaskedExample};
use crate::model::MocaModel;
use crate::numerics::{Gradients, NumericsError, ParamId, ParamStore, Tape, Var};
use crate::retrieval::{LessonIndex, RetrievalStrategy};
use crate::scalar::{cast, to_f64, Scalar};
use crate::text::{normalize_lso, tokenize, QuestionRecord, QuestionType, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no masked positions")]
    NothingMasked,
    #[error("gold index {gold} out of range for {options} options")]
    BadGold { gold: usize, options: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("record `{0}` has no answer_index")]
    Unlabeled(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Pipeline(#[from] GmeError),
    #[error("encode: {0}")]
    Encode(#[from] CgmaError),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::NonFiniteLoss { .. } => true,
            Self::Numerics(e) => e.is_numerical(),
            Self::Pipeline(e) => e.is_numerical(),
            Self::Encode(CgmaError::Numerics(e)) => e.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Mc,
}

impl std::str::FromStr for Objective {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlm" => Ok(Self::Mlm),
            "mc" => Ok(Self::Mc),
            _ => Err(TrainError::Config(format!(
                "unknown objective `{s}` (expected mlm or mc)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub curve: Vec<f64>,
    /// Loss over the whole data set before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.curve.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Output projection from encoder features to vocabulary logits.
#[derive(Clone, Debug)]
pub struct MlmHead<T> {
    pub store: ParamStore<T>,
    pub w: ParamId,
    pub b: ParamId,
}

impl<T: Scalar> MlmHead<T> {
    pub fn new(d_model: usize, vocab_size: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, seed);
        let w = init.uniform("mlm.w", d_model, vocab_size);
        let b = init.filled("mlm.b", 1, vocab_size, 0.0);
        Self { store, w, b }
    }
}

/// Mean cross-entropy of `logits` (`n × V`) over positions whose label is a
/// token id; ignored positions carry a negative label.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[i64],
) -> Result<Var, TrainError> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| usize::try_from(l).ok()).collect();
    if targets.iter().all(Option::is_none) {
        return Err(TrainError::NothingMasked);
    }
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Cross-entropy of the softmax over option scores (`1 × k`) at `gold`.
pub fn mc_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, gold: usize) -> Result<Var, TrainError> {
    let options = tape.shape(scores).1;
    if gold >= options {
        return Err(TrainError::BadGold { gold, options });
    }
    Ok(tape.cross_entropy(scores, &[Some(gold)])?)
}

/// `[CLS] tokens [SEP]` padded to `n`, tokens truncated to fit.
pub fn mlm_sequence(text: &str, vocab: &Vocab, n: usize) -> Vec<u32> {
    let s = vocab.specials();
    let mut ids = vec![s.cls];
    ids.extend(tokenize(text, vocab).into_iter().take(n.saturating_sub(2)));
    ids.push(s.sep);
    ids.resize(n, s.pad);
    ids
}

fn example_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    h: &[Var],
    model: &MocaModel<T>,
    head: &MlmHead<T>,
    vocab: &Vocab,
    ex: &MaskedExample,
) -> Result<Var, TrainError> {
    let pad = vocab.specials().pad;
    let mask: Vec<bool> = ex.input_ids.iter().map(|&t| t != pad).collect();
    let enc = encode_text(tape, p, &model.encoder, &ex.input_ids, &mask)?;
    let logits = tape.linear(enc.out, h[head.w], h[head.b])?;
    mlm_loss(tape, logits, &ex.labels)
}

fn mean_loss<T: Scalar>(tape: &mut Tape<T>, losses: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, cast(1.0 / losses.len() as f64))
}

fn sgd<T: Scalar>(
    store: &mut ParamStore<T>,
    vars: &[Var],
    grads: &Gradients<T>,
    lr: f64,
) -> Result<(), NumericsError> {
    for (value, &v) in store.values_mut().iter_mut().zip(vars) {
        if let Some(g) = grads.get(v) {
            *value = value.sub(&g.scale(cast(lr))?)?;
        }
    }
    Ok(())
}

fn finite(loss: f64, step: usize) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFiniteLoss { step })
    }
}

/// Batches of example indices; each epoch is a fresh seeded shuffle.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Average masked-LM loss over every sequence with masks drawn from `seed`.
pub fn mlm_eval_loss<T: Scalar>(
    model: &MocaModel<T>,
    head: &MlmHead<T>,
    vocab: &Vocab,
    sequences: &[Vec<u32>],
    policy: &MaskPolicy,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (i, seq) in sequences.iter().enumerate() {
        let ex = mask_sequence(seq, None, vocab, policy, seed.wrapping_add(i as u64))?;
        let mut tape = Tape::new();
        let p = tape.bind(&model.store);
        let h = tape.bind(&head.store);
        let l = example_loss(&mut tape, &p, &h, model, head, vocab, &ex)?;
        total += to_f64(tape.value(l).get(0, 0));
    }
    Ok(total / sequences.len() as f64)
}

/// Span-masked language modelling; masks are redrawn on every visit.
pub fn train_mlm<T: Scalar>(
    model: &mut MocaModel<T>,
    head: &mut MlmHead<T>,
    vocab: &Vocab,
    sequences: &[Vec<u32>],
    policy: &MaskPolicy,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let eval_seed = cfg.seed ^ EVAL_SEED_SALT;
    let initial_loss = finite(
        mlm_eval_loss(model, head, vocab, sequences, policy, eval_seed)?,
        0,
    )?;
    let mut stream = BatchStream::new(sequences.len(), cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let p = tape.bind(&model.store);
        let h = tape.bind(&head.store);
        let losses = stream
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| {
                let ex = mask_sequence(&sequences[i], None, vocab, policy, mask_rng.random())?;
                example_loss(&mut tape, &p, &h, model, head, vocab, &ex)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let loss = mean_loss(&mut tape, &losses)?;
        curve.push(finite(to_f64(tape.value(loss).get(0, 0)), step)?);
        let grads = tape.backward(loss)?;
        sgd(&mut model.store, &p, &grads, cfg.learning_rate)?;
        sgd(&mut head.store, &h, &grads, cfg.learning_rate)?;
    }
    let final_loss = finite(
        mlm_eval_loss(model, head, vocab, sequences, policy, eval_seed)?,
        cfg.steps,
    )?;
    Ok(TrainReport {
        curve,
        initial_loss,
        final_loss,
    })
}

/// Option scores (`1 × k`) of the text-only pipeline, recorded on `tape`.
/// Identical token sequences are encoded once.
pub fn mc_scores<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    pipeline: &Pipeline<'_, T>,
    record: &QuestionRecord,
    w: &EnsembleWeights,
) -> Result<Var, TrainError> {
    let record = QuestionRecord {
        options: normalize_lso(&record.options),
        ..record.clone()
    };
    let index = LessonIndex::new(&record.context);
    let cls = &pipeline.model.classifier;
    let mut cache: HashMap<Vec<u32>, Var> = HashMap::new();
    let mut scores = Vec::with_capacity(record.options.len());
    for o in 0..record.options.len() {
        let mut acc: Option<Var> = None;
        for (strategy, lambda) in RetrievalStrategy::ALL.into_iter().zip(w.lambdas()) {
            let seq = pipeline.option_input(&record, &index, o, strategy)?;
            let out = pipeline.encode_cached(tape, p, &seq, &mut cache)?;
            let cls_row = tape.select_row(out, 0)?;
            let term = tape.scale(cls_row, cast(lambda))?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let f = acc.expect("three strategies");
        scores.push(tape.linear(f, p[cls.w], p[cls.b])?);
    }
    Ok(tape.concat_cols(&scores)?)
}

fn text_pipeline<'a, T: Scalar>(
    model: &'a MocaModel<T>,
    vocab: &'a Vocab,
    diagrams: &'a SyntheticDiagrams,
    budget: usize,
) -> Pipeline<'a, T> {
    Pipeline {
        model,
        vocab,
        diagrams,
        budget,
    }
}

fn dummy_diagrams(model: &MocaModel<impl Scalar>) -> SyntheticDiagrams {
    SyntheticDiagrams {
        side: model.config.image_side(),
        channels: model.config.channels,
    }
}

/// Mean multiple-choice loss and accuracy of the text-only pipeline.
pub fn mc_evaluate<T: Scalar>(
    model: &MocaModel<T>,
    vocab: &Vocab,
    records: &[QuestionRecord],
    w: &EnsembleWeights,
    budget: usize,
) -> Result<(f64, f64), TrainError> {
    let diagrams = dummy_diagrams(model);
    let pipeline = text_pipeline(model, vocab, &diagrams, budget);
    let mut loss = 0.0;
    let mut correct = 0;
    for r in records {
        let gold = r
            .answer_index
            .ok_or_else(|| TrainError::Unlabeled(r.id.clone()))?;
        let mut tape = Tape::new();
        let p = tape.bind(&model.store);
        let s = mc_scores(&mut tape, &p, &pipeline, r, w)?;
        let scores: Vec<f64> = tape.value(s).data().iter().map(|&x| to_f64(x)).collect();
        if argmax(&scores) == gold {
            correct += 1;
        }
        let l = mc_loss(&mut tape, s, gold)?;
        loss += to_f64(tape.value(l).get(0, 0));
    }
    let n = records.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Multiple-choice fine-tuning of encoder and classifier on labeled records.
pub fn train_mc<T: Scalar>(
    model: &mut MocaModel<T>,
    vocab: &Vocab,
    records: &[QuestionRecord],
    w: &EnsembleWeights,
    budget: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    w.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for r in records {
        r.validate().map_err(GmeError::from)?;
        let gold = r
            .answer_index
            .ok_or_else(|| TrainError::Unlabeled(r.id.clone()))?;
        if gold >= r.options.len() {
            return Err(TrainError::BadGold {
                gold,
                options: r.options.len(),
            });
        }
    }
    let initial_loss = finite(mc_evaluate(model, vocab, records, w, budget)?.0, 0)?;
    let mut stream = BatchStream::new(records.len(), cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = stream.next_batch(cfg.batch_size);
        let mut tape = Tape::new();
        let p = tape.bind(&model.store);
        let (loss, grads) = {
            let diagrams = dummy_diagrams(model);
            let pipeline = text_pipeline(model, vocab, &diagrams, budget);
            let losses = batch
                .iter()
                .map(|&i| {
                    let s = mc_scores(&mut tape, &p, &pipeline, &records[i], w)?;
                    mc_loss(&mut tape, s, records[i].answer_index.unwrap_or(0))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let loss = mean_loss(&mut tape, &losses)?;
            (to_f64(tape.value(loss).get(0, 0)), tape.backward(loss)?)
        };
        curve.push(finite(loss, step)?);
        sgd(&mut model.store, &p, &grads, cfg.learning_rate)?;
    }
    let final_loss = finite(mc_evaluate(model, vocab, records, w, budget)?.0, cfg.steps)?;
    Ok(TrainReport {
        curve,
        initial_loss,
        final_loss,
    })
}

/// Synthetic corpus for the masked-LM check. Sentence `k` belongs to topic
/// `k mod 10` and draws its twelve words from that topic's four words, so a
/// masked word is predictable from the rest of its sentence but not from
/// word frequencies alone.
pub fn synthetic_mlm_corpus(
    sentences: usize,
    vocab_size: usize,
    seed: u64,
) -> (Vocab, Vec<String>) {
    const TOPICS: usize = 10;
    const TOPIC_WORDS: usize = 4;
    const LEN: usize = 12;
    let words = vocab_size
        .saturating_sub(crate::text::SPECIAL_TOKENS.len())
        .max(TOPICS * TOPIC_WORDS);
    let vocab = Vocab::from_words((0..words).map(|i| format!("w{i:03}")));
    let stride = words / TOPICS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (0..sentences)
        .map(|k| {
            let base = (k % TOPICS) * stride;
            (0..LEN)
                .map(|_| format!("w{:03}", base + rng.random_range(0..TOPIC_WORDS)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    (vocab, lines)
}

/// Separable multiple-choice set: the gold option is always a word from a
/// "correct" pool and distractors come from a disjoint pool.
pub fn synthetic_mc_records(n: usize, options: usize, seed: u64) -> (Vocab, Vec<QuestionRecord>) {
    let good: Vec<String> = (0..8).map(|i| format!("good{i}")).collect();
    let bad: Vec<String> = (0..8).map(|i| format!("bad{i}")).collect();
    let filler: Vec<String> = (0..16).map(|i| format!("q{i}")).collect();
    let vocab = Vocab::from_words(good.iter().chain(&bad).chain(&filler).cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let gold = rng.random_range(0..options);
            let opts = (0..options)
                .map(|o| {
                    let pool = if o == gold { &good } else { &bad };
                    pool[rng.random_range(0..pool.len())].clone()
                })
                .collect();
            let question = (0..4)
                .map(|_| filler[rng.random_range(0..filler.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            QuestionRecord {
                id: format!("syn{i:03}"),
                context: String::new(),
                question,
                options: opts,
                answer_index: Some(gold),
                question_diagram: None,
                instructional_diagrams: Vec::new(),
                qtype: QuestionType::TMC,
            }
        })
        .collect();
    (vocab, records)
}
