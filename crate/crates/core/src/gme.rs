//! Gating model ensemble: blends the three retrieval variants, gates text
//! against multimodal features, scores options and picks the answer.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cgma::{
    diagram_feature, encode_text, progressive_update, CgmaError, DiagramInput, DiagramProvider,
};
use crate::model::{Classifier, MocaModel};
use crate::numerics::{Matrix, NumericsError, Tape, Var};
use crate::retrieval::{LessonIndex, RetrievalError, RetrievalStrategy};
use crate::scalar::{cast, to_f64, Scalar};
use crate::text::{
    build_input, normalize_lso, QuestionRecord, QuestionType, TextError, TokenSeq, Vocab,
};

/// Default gate between text-only and multimodal features.
pub const DEFAULT_MU: f64 = 0.6;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum GmeError {
    #[error("ensemble weights: {0}")]
    Weights(String),
    #[error("combine: {0}")]
    Combine(NumericsError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("input: {0}")]
    Input(#[from] TextError),
    #[error("encode: {0}")]
    Encode(CgmaError),
    #[error("multimodal: {0}")]
    Multimodal(CgmaError),
    #[error("classify: {0}")]
    Classify(NumericsError),
    #[error("classify: no options")]
    NoOptions,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("record `{id}`: {source}")]
    Record { id: String, source: Box<GmeError> },
}

impl GmeError {
    /// True when the failure is a non-finite value rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::Combine(e) | Self::Classify(e) => e.is_numerical(),
            Self::Encode(CgmaError::Numerics(e)) | Self::Multimodal(CgmaError::Numerics(e)) => {
                e.is_numerical()
            }
            Self::Record { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

/// `λ₁`, `λ₂` weight the IR and NSP variants (NN takes the rest); `μ` gates
/// multimodal against text-only features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
}

impl Default for EnsembleWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0 / 3.0,
            lambda2: 1.0 / 3.0,
            mu: DEFAULT_MU,
        }
    }
}

impl EnsembleWeights {
    pub fn new(lambda1: f64, lambda2: f64, mu: f64) -> Result<Self, GmeError> {
        let w = Self {
            lambda1,
            lambda2,
            mu,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn lambda3(&self) -> f64 {
        (1.0 - self.lambda1 - self.lambda2).max(0.0)
    }

    pub fn validate(&self) -> Result<(), GmeError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.lambda1) || !unit(self.lambda2) {
            return Err(GmeError::Weights(format!(
                "lambda1={} and lambda2={} must lie in [0, 1]",
                self.lambda1, self.lambda2
            )));
        }
        if self.lambda1 + self.lambda2 > 1.0 + WEIGHT_TOL {
            return Err(GmeError::Weights(format!(
                "lambda1 + lambda2 = {} exceeds 1",
                self.lambda1 + self.lambda2
            )));
        }
        if !unit(self.mu) {
            return Err(GmeError::Weights(format!(
                "mu={} must lie in [0, 1]",
                self.mu
            )));
        }
        Ok(())
    }

    /// Ensemble weights in [`RetrievalStrategy::ALL`] order.
    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3()]
    }
}

/// Where the ensemble blends: on features before the classifier, or on the
/// option scores it produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    #[default]
    Feature,
    Logit,
}

fn weighted_sum<T: Scalar>(parts: &[(&Matrix<T>, f64)]) -> Result<Matrix<T>, NumericsError> {
    let (first, w0) = parts[0];
    let mut acc = first.scale(cast(w0))?;
    for &(m, w) in &parts[1..] {
        acc = acc.add(&m.scale(cast(w))?)?;
    }
    Ok(acc)
}

/// `λ₁·f_ir + λ₂·f_nsp + (1−λ₁−λ₂)·f_nn`.
pub fn combine_retrievals<T: Scalar>(
    f_ir: &Matrix<T>,
    f_nsp: &Matrix<T>,
    f_nn: &Matrix<T>,
    w: &EnsembleWeights,
) -> Result<Matrix<T>, GmeError> {
    w.validate()?;
    let [a, b, c] = w.lambdas();
    weighted_sum(&[(f_ir, a), (f_nsp, b), (f_nn, c)]).map_err(GmeError::Combine)
}

/// `(1−μ)·f_text + μ·f_mm`.
pub fn gate<T: Scalar>(
    f_text: &Matrix<T>,
    f_mm: &Matrix<T>,
    mu: f64,
) -> Result<Matrix<T>, GmeError> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(GmeError::Weights(format!("mu={mu} must lie in [0, 1]")));
    }
    weighted_sum(&[(f_text, 1.0 - mu), (f_mm, mu)]).map_err(GmeError::Combine)
}

/// Per-option scores, their softmax and the chosen option.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionScores {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_index: usize,
}

impl OptionScores {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self, GmeError> {
        if scores.is_empty() {
            return Err(GmeError::NoOptions);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(Self {
            predicted_index: argmax(&scores),
            probabilities: exps.iter().map(|e| e / total).collect(),
            scores,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn cls_score<T: Scalar>(f: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<f64, NumericsError> {
    let cls = f.slice_rows(0, 1);
    Ok(to_f64(cls.linear(w, b)?.get(0, 0)))
}

/// Pools the `[CLS]` row of each option feature and applies the linear scorer.
pub fn classify<T: Scalar>(
    features: &[Matrix<T>],
    w: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<OptionScores, GmeError> {
    if features.is_empty() {
        return Err(GmeError::NoOptions);
    }
    let scores = features
        .iter()
        .map(|f| {
            if f.rows() == 0 {
                return Err(GmeError::Classify(NumericsError::InvalidArgument(
                    "empty feature".into(),
                )));
            }
            cls_score(f, w, b).map_err(GmeError::Classify)
        })
        .collect::<Result<Vec<_>, _>>()?;
    OptionScores::from_scores(scores)
}

/// Pooled `[CLS]` rows of one option: a text feature per retrieval strategy
/// and, for diagram questions, the matching multimodal features.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionFeatures<T> {
    pub text: [Matrix<T>; 3],
    pub multimodal: Option<[Matrix<T>; 3]>,
}

impl<T: Scalar> OptionFeatures<T> {
    /// Text-only path: the retrieval ensemble without the gate.
    pub fn text_only(&self, w: &EnsembleWeights) -> Result<Matrix<T>, GmeError> {
        combine_retrievals(&self.text[0], &self.text[1], &self.text[2], w)
    }

    /// Final feature: ensemble of text variants, gated with the ensemble of
    /// multimodal variants when present.
    pub fn blended(&self, w: &EnsembleWeights) -> Result<Matrix<T>, GmeError> {
        let text = self.text_only(w)?;
        match &self.multimodal {
            Some(mm) => gate(&text, &combine_retrievals(&mm[0], &mm[1], &mm[2], w)?, w.mu),
            None => Ok(text),
        }
    }

    fn score(
        &self,
        w: &EnsembleWeights,
        mode: EnsembleMode,
        cls: (&Matrix<T>, &Matrix<T>),
    ) -> Result<f64, GmeError> {
        match mode {
            EnsembleMode::Feature => {
                cls_score(&self.blended(w)?, cls.0, cls.1).map_err(GmeError::Classify)
            }
            EnsembleMode::Logit => {
                let s = |f: &Matrix<T>| cls_score(f, cls.0, cls.1).map_err(GmeError::Classify);
                let lambdas = w.lambdas();
                let mut text = 0.0;
                for (f, l) in self.text.iter().zip(lambdas) {
                    text += l * s(f)?;
                }
                match &self.multimodal {
                    Some(mm) => {
                        let mut m = 0.0;
                        for (f, l) in mm.iter().zip(lambdas) {
                            m += l * s(f)?;
                        }
                        Ok((1.0 - w.mu) * text + w.mu * m)
                    }
                    None => Ok(text),
                }
            }
        }
    }
}

/// Everything needed to run records end to end.
pub struct Pipeline<'a, T> {
    pub model: &'a MocaModel<T>,
    pub vocab: &'a Vocab,
    pub diagrams: &'a dyn DiagramProvider,
    pub budget: usize,
}

/// Bound parameters and shared diagram features for one record.
struct RecordPass<T> {
    tape: Tape<T>,
    p: Vec<Var>,
    diagrams: Option<(Var, Var)>,
    encoded: HashMap<Vec<u32>, Var>,
    fused: HashMap<Var, Var>,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    /// Aligned question-diagram and instructional-diagram features of a DMC
    /// record; `None` for text questions.
    pub fn diagram_features(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        record: &QuestionRecord,
    ) -> Result<Option<(Var, Var)>, GmeError> {
        if record.qtype != QuestionType::DMC {
            return Ok(None);
        }
        let cfg = &self.model.config;
        let cgma = &self.model.cgma;
        let load = |reference: &str| self.diagrams.load(reference).map(DiagramInput::Pixels);
        let qd_ref =
            record
                .question_diagram
                .as_deref()
                .ok_or_else(|| TextError::InvalidRecord {
                    id: record.id.clone(),
                    reason: "DMC record without question_diagram".into(),
                })?;
        let qd_img = load(qd_ref).map_err(GmeError::Multimodal)?;
        let qd = diagram_feature(tape, p, cgma, &qd_img, cfg.grid).map_err(GmeError::Multimodal)?;
        let id = if record.instructional_diagrams.is_empty() {
            if !cfg.zero_id_placeholder {
                return Err(GmeError::Multimodal(CgmaError::MissingInstructionalDiagram));
            }
            tape.constant(Matrix::zeros(cfg.seq_len, cfg.d_model))
        } else {
            let mut feats = Vec::with_capacity(record.instructional_diagrams.len());
            for r in &record.instructional_diagrams {
                let img = load(r).map_err(GmeError::Multimodal)?;
                feats.push(
                    diagram_feature(tape, p, cgma, &img, cfg.grid).map_err(GmeError::Multimodal)?,
                );
            }
            mean_vars(tape, &feats).map_err(GmeError::Multimodal)?
        };
        Ok(Some((qd, id)))
    }

    fn begin(&self, record: &QuestionRecord, multimodal: bool) -> Result<RecordPass<T>, GmeError> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.model.store);
        let mut pass = RecordPass {
            tape,
            p,
            diagrams: None,
            encoded: HashMap::new(),
            fused: HashMap::new(),
        };
        if multimodal {
            pass.diagrams = self.diagram_features(&mut pass.tape, &pass.p, record)?;
        }
        Ok(pass)
    }

    /// Retrieved context plus question and option, as model input.
    pub fn option_input(
        &self,
        record: &QuestionRecord,
        index: &LessonIndex,
        option: usize,
        strategy: RetrievalStrategy,
    ) -> Result<TokenSeq, GmeError> {
        let opt = record
            .options
            .get(option)
            .ok_or(TextError::OptionOutOfRange {
                index: option,
                count: record.options.len(),
            })?;
        let ctx = index.retrieve(
            &strategy.query(&record.question, opt),
            strategy,
            self.budget,
        )?;
        let view = QuestionRecord {
            context: ctx.text(),
            ..record.clone()
        };
        Ok(build_input(
            &view,
            option,
            self.vocab,
            self.model.config.seq_len,
        )?)
    }

    /// Encoder output for `seq`, reusing an earlier encoding of the same ids.
    pub fn encode_cached(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        seq: &TokenSeq,
        cache: &mut HashMap<Vec<u32>, Var>,
    ) -> Result<Var, GmeError> {
        if let Some(&v) = cache.get(&seq.ids) {
            return Ok(v);
        }
        let enc = encode_text(tape, p, &self.model.encoder, &seq.ids, &seq.key_mask())
            .map_err(GmeError::Encode)?;
        cache.insert(seq.ids.clone(), enc.out);
        Ok(enc.out)
    }

    fn option_features(
        &self,
        pass: &mut RecordPass<T>,
        record: &QuestionRecord,
        index: &LessonIndex,
        option: usize,
    ) -> Result<OptionFeatures<T>, GmeError> {
        let mut text = Vec::with_capacity(3);
        let mut mm = Vec::with_capacity(3);
        for strategy in RetrievalStrategy::ALL {
            let seq = self.option_input(record, index, option, strategy)?;
            let f_t = self.encode_cached(&mut pass.tape, &pass.p, &seq, &mut pass.encoded)?;
            text.push(pass.tape.value(f_t).slice_rows(0, 1));
            if let Some((qd, id)) = pass.diagrams {
                let f_mm = match pass.fused.get(&f_t) {
                    Some(&v) => v,
                    None => {
                        let tr = progressive_update(
                            &mut pass.tape,
                            &pass.p,
                            &self.model.cgma,
                            f_t,
                            qd,
                            id,
                            Some(&seq.key_mask()),
                        )
                        .map_err(GmeError::Multimodal)?;
                        let v = mean_vars(&mut pass.tape, &[tr.text, tr.qd, tr.id])
                            .map_err(GmeError::Multimodal)?;
                        pass.fused.insert(f_t, v);
                        v
                    }
                };
                mm.push(pass.tape.value(f_mm).slice_rows(0, 1));
            }
        }
        let arr = |v: Vec<Matrix<T>>| -> [Matrix<T>; 3] { v.try_into().expect("three strategies") };
        Ok(OptionFeatures {
            text: arr(text),
            multimodal: if mm.is_empty() { None } else { Some(arr(mm)) },
        })
    }

    /// Pooled features of every option. `multimodal = false` skips the
    /// diagram branch even for DMC records.
    pub fn record_features(
        &self,
        record: &QuestionRecord,
        multimodal: bool,
    ) -> Result<Vec<OptionFeatures<T>>, GmeError> {
        let run = || -> Result<Vec<OptionFeatures<T>>, GmeError> {
            record.validate()?;
            let record = QuestionRecord {
                options: normalize_lso(&record.options),
                ..record.clone()
            };
            let index = LessonIndex::new(&record.context);
            let mut pass = self.begin(&record, multimodal)?;
            (0..record.options.len())
                .map(|o| self.option_features(&mut pass, &record, &index, o))
                .collect()
        };
        run().map_err(|e| GmeError::Record {
            id: record.id.clone(),
            source: Box::new(e),
        })
    }

    fn classifier(&self) -> (&Matrix<T>, &Matrix<T>) {
        let Classifier { w, b } = &self.model.classifier;
        (self.model.store.get(*w), self.model.store.get(*b))
    }

    pub fn score_features(
        &self,
        features: &[OptionFeatures<T>],
        w: &EnsembleWeights,
        mode: EnsembleMode,
    ) -> Result<OptionScores, GmeError> {
        let cls = self.classifier();
        let scores = features
            .iter()
            .map(|f| f.score(w, mode, cls))
            .collect::<Result<Vec<_>, _>>()?;
        OptionScores::from_scores(scores)
    }

    /// Retrieval ×3, encoding, the multimodal branch for diagram questions,
    /// ensemble, gate and classification.
    pub fn predict(
        &self,
        record: &QuestionRecord,
        w: &EnsembleWeights,
        mode: EnsembleMode,
    ) -> Result<OptionScores, GmeError> {
        w.validate()?;
        let feats = self.record_features(record, true)?;
        self.score_features(&feats, w, mode)
    }

    /// Same pipeline with the multimodal branch removed.
    pub fn predict_text_only(
        &self,
        record: &QuestionRecord,
        w: &EnsembleWeights,
    ) -> Result<OptionScores, GmeError> {
        w.validate()?;
        let feats = self.record_features(record, false)?;
        let cls = self.classifier();
        let scores = feats
            .iter()
            .map(|f| cls_score(&f.text_only(w)?, cls.0, cls.1).map_err(GmeError::Classify))
            .collect::<Result<Vec<_>, _>>()?;
        OptionScores::from_scores(scores)
    }

    /// Accuracy at every `mu` over records with a gold answer. Features are
    /// computed once per record.
    pub fn gate_sweep(
        &self,
        records: &[QuestionRecord],
        w: &EnsembleWeights,
        mus: &[f64],
    ) -> Result<Vec<SweepRow>, GmeError> {
        let labeled: Vec<&QuestionRecord> = records
            .iter()
            .filter(|r| r.answer_index.is_some())
            .collect();
        let feats = labeled
            .iter()
            .map(|r| Ok((self.record_features(r, true)?, r.answer_index.unwrap_or(0))))
            .collect::<Result<Vec<_>, GmeError>>()?;
        let cls = self.classifier();
        sweep(&feats, w, mus, |f, w| {
            let scores = f
                .iter()
                .map(|o| o.score(w, EnsembleMode::Feature, cls))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(argmax(&scores))
        })
    }
}

fn mean_vars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var, CgmaError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, cast(1.0 / vars.len() as f64))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mu: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Accuracy per `mu` given per-record features and a predictor.
pub fn sweep<F, P>(
    records: &[(F, usize)],
    w: &EnsembleWeights,
    mus: &[f64],
    predict: P,
) -> Result<Vec<SweepRow>, GmeError>
where
    P: Fn(&F, &EnsembleWeights) -> Result<usize, GmeError>,
{
    if records.is_empty() {
        return Err(GmeError::EmptySet);
    }
    mus.iter()
        .map(|&mu| {
            let wm = EnsembleWeights::new(w.lambda1, w.lambda2, mu)?;
            let mut correct = 0usize;
            for (f, gold) in records {
                if predict(f, &wm)? == *gold {
                    correct += 1;
                }
            }
            Ok(SweepRow {
                mu,
                accuracy: correct as f64 / records.len() as f64,
                n: records.len(),
            })
        })
        .collect()
}

/// Parses `start:stop:step` into an inclusive grid rounded to 12 decimals.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, GmeError> {
    let bad = || GmeError::Weights(format!("grid `{spec}` must be start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mu,accuracy,n\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.mu, r.accuracy, r.n).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix<f64> {
        Matrix::from_f64_rows(&[v]).unwrap()
    }

    #[test]
    fn combine_examples() {
        let (a, b, c) = (row(&[1.0, 0.0]), row(&[0.0, 1.0]), row(&[1.0, 1.0]));
        let w = EnsembleWeights::new(1.0, 0.0, 0.6).unwrap();
        assert_eq!(combine_retrievals(&a, &b, &c, &w).unwrap(), a);
        let w = EnsembleWeights::new(0.5, 0.3, 0.6).unwrap();
        let f = combine_retrievals(&a, &b, &c, &w).unwrap();
        assert!((f.get(0, 0) - 0.7).abs() < 1e-15 && (f.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gate_examples() {
        let (t, m) = (row(&[1.0, 0.0]), row(&[0.0, 1.0]));
        assert_eq!(gate(&t, &m, 0.0).unwrap(), t);
        let g = gate(&t, &m, DEFAULT_MU).unwrap();
        assert!((g.get(0, 0) - 0.4).abs() < 1e-15 && (g.get(0, 1) - 0.6).abs() < 1e-15);
        let half = gate(&row(&[2.0, 4.0]), &row(&[4.0, 8.0]), 0.5).unwrap();
        assert_eq!(half, row(&[3.0, 6.0]));
        assert!(gate(&t, &m, 1.1).is_err());
    }

    #[test]
    fn weight_validation() {
        assert!(EnsembleWeights::new(0.7, 0.4, 0.5).is_err());
        assert!(EnsembleWeights::new(-0.1, 0.4, 0.5).is_err());
        assert!(EnsembleWeights::new(0.5, 0.5, 1.0).is_ok());
        assert_eq!(EnsembleWeights::default().mu, 0.6);
    }

    #[test]
    fn classify_ties_and_shift() {
        let f = row(&[0.3, -0.2]);
        let w = Matrix::from_f64_rows(&[&[1.0], &[2.0]]).unwrap();
        let s = classify(&[f.clone(), f.clone(), f], &w, &row(&[0.5])).unwrap();
        assert_eq!(s.predicted_index, 0);
        assert!(s
            .probabilities
            .iter()
            .all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let a = OptionScores::from_scores(vec![0.1, 2.0, 1.0]).unwrap();
        let b = OptionScores::from_scores(vec![5.1, 7.0, 6.0]).unwrap();
        assert_eq!(a.predicted_index, b.predicted_index);
        assert!(matches!(
            OptionScores::from_scores(vec![]),
            Err(GmeError::NoOptions)
        ));
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
    }
}
