//! One function per subcommand.

use std::path::{Path, PathBuf};

use moca_core::cgma::{
    attention_grids, dump_attention, encode_text, gradcheck_progressive, progressive_update,
    DiagramProvider, ImageDir, InterpAxis, SyntheticDiagrams,
};
use moca_core::corpus::{curate as run_curation, Corpus};
use moca_core::gme::{parse_grid, sweep_csv, EnsembleMode, Pipeline};
use moca_core::masking::{mask_sequence, MaskMode, MaskStats, Span};
use moca_core::retrieval::{LessonIndex, RetrievalStrategy};
use moca_core::text::{normalize_lso, QuestionRecord, Vocab};
use moca_core::trainer::{mlm_sequence, train_mc, train_mlm, MlmHead, Objective, TrainConfig};
use moca_core::{Model64, RunConfig};
use serde::Deserialize;

use crate::io::{
    data_lines, header, load_config, parse_or_usage, read_jsonl, read_records, read_text,
    read_vocab, write_file, CliError,
};
use crate::{Common, ModelInputs};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[allow(clippy::too_many_arguments)]
pub fn curate(
    common: &Common,
    coarse: &Path,
    tqa: &Path,
    delta: Option<f64>,
    target_frac: Option<f64>,
    max_iters: Option<usize>,
    out: &Path,
    report: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(d) = delta {
        cfg.curation.delta = d;
    }
    if let Some(f) = target_frac {
        cfg.curation.target_fraction = Some(f);
    }
    if let Some(m) = max_iters {
        cfg.curation.max_iterations = m;
    }
    let coarse_corpus = Corpus::from_text(&read_text(coarse)?, coarse.display().to_string());
    let tqa_corpus = Corpus::from_text(&read_text(tqa)?, tqa.display().to_string());
    let (curated, rep) = run_curation(&coarse_corpus, &tqa_corpus, &cfg.curation.to_config())
        .map_err(CliError::data)?;
    write_file(out, curated.to_text().as_bytes())?;
    write_file(
        report,
        format!("{}{}", header(&cfg), rep.to_csv()).as_bytes(),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskInput {
    ids: Vec<u32>,
    #[serde(default)]
    words: Option<Vec<Span>>,
}

pub fn mask(
    common: &Common,
    input: &Path,
    vocab: &Path,
    mode: Option<&str>,
    seed: Option<u64>,
    out: &Path,
    stats: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.mask.mode =
            serde_json::from_value::<MaskMode>(serde_json::Value::String(m.to_string())).map_err(
                |_| CliError::Usage(format!("--mode `{m}` (expected span, random or wholeword)")),
            )?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let vocab = read_vocab(vocab)?;
    let rows: Vec<MaskInput> = read_jsonl(input)?;
    let mut body = header(&cfg);
    let mut agg = MaskStats::default();
    for (i, row) in rows.iter().enumerate() {
        let ex = mask_sequence(
            &row.ids,
            row.words.as_deref(),
            &vocab,
            &cfg.mask,
            cfg.seed.wrapping_add(i as u64),
        )
        .map_err(|e| CliError::Data(format!("{}: sequence {}: {e}", input.display(), i + 1)))?;
        agg.add(&row.ids, &ex, &vocab);
        body.push_str(&serde_json::to_string(&ex).expect("example serializes"));
        body.push('\n');
    }
    write_file(out, body.as_bytes())?;
    write_file(
        stats,
        format!("{}{}", header(&cfg), agg.to_csv()).as_bytes(),
    )
}

pub fn lso(common: &Common, input: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mut body = header(&cfg);
    for r in read_records(input)? {
        let r = QuestionRecord {
            options: normalize_lso(&r.options),
            ..r
        };
        body.push_str(&serde_json::to_string(&r).expect("record serializes"));
        body.push('\n');
    }
    write_file(out, body.as_bytes())
}

pub fn retrieve(
    common: &Common,
    lesson: &Path,
    question: &Path,
    option: &str,
    strategy: &str,
    budget: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    let strategy: RetrievalStrategy = parse_or_usage(strategy, "--strategy")?;
    if let Some(b) = budget {
        cfg.retrieval_budget = b;
    }
    let question = read_text(question)?;
    let index = LessonIndex::new(&read_text(lesson)?);
    let ranked = index
        .retrieve(
            &strategy.query(question.trim(), option),
            strategy,
            cfg.retrieval_budget,
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let body = format!(
        "{}{}\n",
        header(&cfg),
        serde_json::to_string_pretty(&ranked).expect("context serializes")
    );
    match out {
        Some(p) => write_file(p, body.as_bytes()),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

pub fn vocab(
    common: &Common,
    inputs: &[PathBuf],
    min_count: u64,
    max_words: usize,
    out: &Path,
) -> Result<(), CliError> {
    load_config(common)?;
    let mut texts = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "jsonl") {
            for r in read_records(p)? {
                texts.push(r.context);
                texts.push(r.question);
                texts.extend(r.options);
            }
        } else {
            texts.push(read_text(p)?);
        }
    }
    let v = Vocab::build(texts.iter().map(String::as_str), min_count, max_words);
    write_file(out, v.to_file_string().as_bytes())
}

pub struct TrainArgs {
    pub objective: String,
    pub data: PathBuf,
    pub vocab: Option<PathBuf>,
    pub init_params: Option<PathBuf>,
    pub out_params: PathBuf,
    pub curve: PathBuf,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
}

fn resolve(
    flag: &Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{what} (or paths.{what} in the config)")))
}

fn new_model(cfg: &RunConfig, vocab: &Vocab) -> Result<Model64, CliError> {
    Model64::new(cfg.model.clone(), vocab.len(), cfg.seed).map_err(CliError::data)
}

fn load_model(cfg: &RunConfig, vocab: &Vocab, params: &Path) -> Result<Model64, CliError> {
    let mut model = new_model(cfg, vocab)?;
    model.load_params(params).map_err(|e| {
        CliError::Data(format!(
            "{}: {e} (parameters must match the model config and vocabulary)",
            params.display()
        ))
    })?;
    Ok(model)
}

pub fn train(common: &Common, args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    let objective: Objective = parse_or_usage(&args.objective, "--objective")?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let vocab = read_vocab(&resolve(&args.vocab, &cfg.paths.vocab, "vocab")?)?;
    let mut model = match &args.init_params {
        Some(p) => load_model(&cfg, &vocab, p)?,
        None => new_model(&cfg, &vocab)?,
    };
    let tc = TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
        objective,
    };
    let report = match objective {
        Objective::Mlm => {
            let text = read_text(&args.data)?;
            let seqs: Vec<Vec<u32>> = data_lines(&text)
                .map(|(_, l)| mlm_sequence(l, &vocab, cfg.model.seq_len))
                .collect();
            let mut head = MlmHead::new(cfg.model.d_model, vocab.len(), cfg.seed.wrapping_add(1));
            train_mlm(&mut model, &mut head, &vocab, &seqs, &cfg.mask, &tc)
        }
        Objective::Mc => {
            let records = read_records(&args.data)?;
            train_mc(
                &mut model,
                &vocab,
                &records,
                &cfg.ensemble,
                cfg.retrieval_budget,
                &tc,
            )
        }
    }
    .map_err(|e| {
        let numerical = e.is_numerical();
        CliError::classify(e, numerical)
    })?;
    model
        .save_params(&args.out_params)
        .map_err(CliError::data)?;
    write_file(
        &args.curve,
        format!("{}{}", header(&cfg), report.curve_csv()).as_bytes(),
    )?;
    println!(
        "initial_loss={} final_loss={}",
        report.initial_loss, report.final_loss
    );
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    vocab: Vocab,
    model: Model64,
    diagrams: Box<dyn DiagramProvider>,
    records: Vec<QuestionRecord>,
}

impl Loaded {
    fn pipeline(&self) -> Pipeline<'_, f64> {
        Pipeline {
            model: &self.model,
            vocab: &self.vocab,
            diagrams: self.diagrams.as_ref(),
            budget: self.cfg.retrieval_budget,
        }
    }
}

fn load_inputs(mut cfg: RunConfig, inputs: &ModelInputs) -> Result<Loaded, CliError> {
    cfg.model.zero_id_placeholder |= inputs.zero_id;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let vocab = read_vocab(&resolve(&inputs.vocab, &cfg.paths.vocab, "vocab")?)?;
    let model = load_model(
        &cfg,
        &vocab,
        &resolve(&inputs.params, &cfg.paths.params, "params")?,
    )?;
    let records = read_records(&inputs.records)?;
    let diagrams: Box<dyn DiagramProvider> = if inputs.synthetic_diagrams {
        Box::new(SyntheticDiagrams {
            side: cfg.model.image_side(),
            channels: cfg.model.channels,
        })
    } else {
        let root = inputs
            .diagrams
            .clone()
            .or_else(|| cfg.paths.diagrams.clone())
            .or_else(|| inputs.records.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        Box::new(ImageDir {
            root,
            side: cfg.model.image_side(),
            channels: cfg.model.channels,
        })
    };
    Ok(Loaded {
        cfg,
        vocab,
        model,
        diagrams,
        records,
    })
}

fn set_weights(
    cfg: &mut RunConfig,
    mu: Option<f64>,
    l1: Option<f64>,
    l2: Option<f64>,
) -> Result<(), CliError> {
    if let Some(m) = mu {
        cfg.ensemble.mu = m;
    }
    if let Some(l) = l1 {
        cfg.ensemble.lambda1 = l;
    }
    if let Some(l) = l2 {
        cfg.ensemble.lambda2 = l;
    }
    cfg.ensemble
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn pipeline_error(e: moca_core::gme::GmeError) -> CliError {
    let numerical = e.is_numerical();
    CliError::classify(e, numerical)
}

pub fn predict(
    common: &Common,
    inputs: &ModelInputs,
    mu: Option<f64>,
    l1: Option<f64>,
    l2: Option<f64>,
    logit_blend: bool,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    set_weights(&mut cfg, mu, l1, l2)?;
    if logit_blend {
        cfg.ensemble_mode = EnsembleMode::Logit;
    }
    let loaded = load_inputs(cfg, inputs)?;
    let pipeline = loaded.pipeline();
    let mut body = header(&loaded.cfg);
    body.push_str("id,option_index,score,probability,predicted\n");
    for r in &loaded.records {
        let s = pipeline
            .predict(r, &loaded.cfg.ensemble, loaded.cfg.ensemble_mode)
            .map_err(pipeline_error)?;
        for (i, (score, prob)) in s.scores.iter().zip(&s.probabilities).enumerate() {
            let chosen = u8::from(i == s.predicted_index);
            body.push_str(&format!(
                "{},{i},{score},{prob},{chosen}\n",
                csv_field(&r.id)
            ));
        }
    }
    write_file(out, body.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn gate_sweep(
    common: &Common,
    inputs: &ModelInputs,
    grid: &str,
    l1: Option<f64>,
    l2: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    set_weights(&mut cfg, None, l1, l2)?;
    let mus = parse_grid(grid).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(bad) = mus.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(CliError::Usage(format!(
            "--grid value {bad} outside [0, 1]"
        )));
    }
    let loaded = load_inputs(cfg, inputs)?;
    let rows = loaded
        .pipeline()
        .gate_sweep(&loaded.records, &loaded.cfg.ensemble, &mus)
        .map_err(pipeline_error)?;
    write_file(
        out,
        format!("{}{}", header(&loaded.cfg), sweep_csv(&rows)).as_bytes(),
    )
}

pub struct DumpArgs {
    pub record: usize,
    pub option: usize,
    pub strategy: String,
    pub block: String,
    pub layer: usize,
    pub interpolate: Option<usize>,
}

pub fn attn_dump(
    common: &Common,
    inputs: &ModelInputs,
    args: DumpArgs,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let strategy: RetrievalStrategy = parse_or_usage(&args.strategy, "--strategy")?;
    let loaded = load_inputs(cfg, inputs)?;
    let record = loaded.records.get(args.record).ok_or_else(|| {
        CliError::Data(format!(
            "--record {} out of range ({} records)",
            args.record,
            loaded.records.len()
        ))
    })?;
    let record = QuestionRecord {
        options: normalize_lso(&record.options),
        ..record.clone()
    };
    let pipeline = loaded.pipeline();
    let index = LessonIndex::new(&record.context);
    let seq = pipeline
        .option_input(&record, &index, args.option, strategy)
        .map_err(pipeline_error)?;
    let mask = seq.key_mask();
    let mut tape = moca_core::Tape64::new();
    let p = tape.bind(&loaded.model.store);
    let enc = encode_text(&mut tape, &p, &loaded.model.encoder, &seq.ids, &mask)
        .map_err(CliError::data)?;

    let layer_err = |n: usize| {
        CliError::Usage(format!(
            "--layer {} out of range ({n} available)",
            args.layer
        ))
    };
    let (trace, axis) = if args.block == "encoder" {
        if args.interpolate.is_some() {
            return Err(CliError::Usage(
                "--interpolate needs a diagram block (qd, text or id)".into(),
            ));
        }
        let t = enc
            .blocks
            .get(args.layer)
            .ok_or_else(|| layer_err(enc.blocks.len()))?
            .clone();
        (t, None)
    } else {
        let (qd, id) = pipeline
            .diagram_features(&mut tape, &p, &record)
            .map_err(pipeline_error)?
            .ok_or_else(|| {
                CliError::Data(format!("record `{}` is not a diagram question", record.id))
            })?;
        let tr = progressive_update(
            &mut tape,
            &p,
            &loaded.model.cgma,
            enc.out,
            qd,
            id,
            Some(&mask),
        )
        .map_err(CliError::data)?;
        let (block, axis) = match args.block.as_str() {
            "qd" => (tr.qd_block, InterpAxis::Query),
            "text" => (tr.text_block, InterpAxis::Key),
            "id" => (tr.id_block, InterpAxis::Query),
            other => {
                return Err(CliError::Usage(format!(
                    "--block `{other}` (expected encoder, qd, text or id)"
                )))
            }
        };
        let n = block.layers.len();
        (
            block
                .layers
                .into_iter()
                .nth(args.layer)
                .ok_or_else(|| layer_err(n))?,
            Some(axis),
        )
    };
    let grids = attention_grids(&tape, &trace);
    let csv = dump_attention(&grids, axis.zip(args.interpolate)).map_err(CliError::data)?;
    write_file(out, format!("{}{}", header(&loaded.cfg), csv).as_bytes())
}

pub fn gradcheck(
    common: &Common,
    dims: &str,
    heads: usize,
    layers: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let parsed: Vec<usize> = dims
        .split(',')
        .map(|s| parse_or_usage(s.trim(), "--dims"))
        .collect::<Result<_, _>>()?;
    let [n, d] = parsed[..] else {
        return Err(CliError::Usage(format!("--dims `{dims}` must be N,d")));
    };
    if n == 0 || d == 0 || heads == 0 || layers == 0 {
        return Err(CliError::Usage(
            "--dims, --heads and --layers must be >= 1".into(),
        ));
    }
    let report = gradcheck_progressive(n, d, heads, layers, cfg.seed).map_err(|e| {
        let numerical = matches!(&e, moca_core::cgma::CgmaError::Numerics(n) if n.is_numerical());
        CliError::classify(e, numerical)
    })?;
    println!(
        "max_rel_err={:e} entries={} worst_param={} worst_entry={}",
        report.max_rel_error, report.entries_checked, report.worst.0, report.worst.1
    );
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(CliError::Numerical(format!(
            "max_rel_err {:e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}
