//! `moca` command-line entry point.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::io::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "moca",
    version,
    about = "Textbook QA pipeline: curation, masking, retrieval, multimodal attention, ensembling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelInputs {
    #[arg(long)]
    pub records: PathBuf,
    /// MOCA1 parameter file (falls back to `paths.params` in the config).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Vocabulary file (falls back to `paths.vocab`).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory diagram references resolve against (default: the records file's directory).
    #[arg(long)]
    pub diagrams: Option<PathBuf>,
    /// Replace diagram files with deterministic pseudo-images keyed by reference.
    #[arg(long)]
    pub synthetic_diagrams: bool,
    /// All-zero instructional-diagram feature for DMC records without one.
    #[arg(long)]
    pub zero_id: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Iteratively filter a coarse corpus toward the target vocabulary.
    Curate {
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        tqa: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        target_frac: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build masked-LM examples from token-id sequences.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rewrite latent-semantic options in question records.
    Lso {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rank lesson sentences for a question.
    Retrieve {
        #[arg(long)]
        lesson: PathBuf,
        /// File holding the question text.
        #[arg(long)]
        question: PathBuf,
        /// Option text appended to the query (ignored by nsp).
        #[arg(long, default_value = "")]
        option: String,
        #[arg(long, default_value = "ir")]
        strategy: String,
        #[arg(long)]
        budget: Option<usize>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a vocabulary file from text or record files.
    Vocab {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long, default_value_t = 30000)]
        max_words: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy model with a masked-LM or multiple-choice objective.
    Train {
        #[arg(long)]
        objective: String,
        /// Text lines (mlm) or question records (mc).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Continue from these parameters instead of a fresh initialization.
        #[arg(long)]
        init_params: Option<PathBuf>,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every option of every record.
    Predict {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        l1: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        /// Blend option scores instead of features.
        #[arg(long)]
        logit_blend: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy over a grid of gate values.
    GateSweep {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        #[arg(long)]
        l1: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dump per-head attention weights of one layer as CSV.
    AttnDump {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Zero-based record index in the records file.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, default_value_t = 0)]
        option: usize,
        #[arg(long, default_value = "ir")]
        strategy: String,
        /// encoder, qd, text or id.
        #[arg(long, default_value = "qd")]
        block: String,
        /// Layer (or encoder block) index.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Resample the diagram axis to this length.
        #[arg(long)]
        interpolate: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the progressive update gradients.
    Gradcheck {
        /// Sequence length and width, `N,d`.
        #[arg(long, default_value = "6,8")]
        dims: String,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::Curate {
            coarse,
            tqa,
            delta,
            target_frac,
            max_iters,
            out,
            report,
            common,
        } => c::curate(
            &common,
            &coarse,
            &tqa,
            delta,
            target_frac,
            max_iters,
            &out,
            &report,
        ),
        Command::Mask {
            input,
            vocab,
            mode,
            seed,
            out,
            stats,
            common,
        } => c::mask(&common, &input, &vocab, mode.as_deref(), seed, &out, &stats),
        Command::Lso { input, out, common } => c::lso(&common, &input, &out),
        Command::Retrieve {
            lesson,
            question,
            option,
            strategy,
            budget,
            out,
            common,
        } => c::retrieve(
            &common,
            &lesson,
            &question,
            &option,
            &strategy,
            budget,
            out.as_deref(),
        ),
        Command::Vocab {
            inputs,
            min_count,
            max_words,
            out,
            common,
        } => c::vocab(&common, &inputs, min_count, max_words, &out),
        Command::Train {
            objective,
            data,
            vocab,
            init_params,
            out_params,
            curve,
            steps,
            lr,
            batch,
            common,
        } => c::train(
            &common,
            c::TrainArgs {
                objective,
                data,
                vocab,
                init_params,
                out_params,
                curve,
                steps,
                lr,
                batch,
            },
        ),
        Command::Predict {
            inputs,
            mu,
            l1,
            l2,
            logit_blend,
            out,
            common,
        } => c::predict(&common, &inputs, mu, l1, l2, logit_blend, &out),
        Command::GateSweep {
            inputs,
            grid,
            l1,
            l2,
            out,
            common,
        } => c::gate_sweep(&common, &inputs, &grid, l1, l2, &out),
        Command::AttnDump {
            inputs,
            record,
            option,
            strategy,
            block,
            layer,
            interpolate,
            out,
            common,
        } => c::attn_dump(
            &common,
            &inputs,
            c::DumpArgs {
                record,
                option,
                strategy,
                block,
                layer,
                interpolate,
            },
            &out,
        ),
        Command::Gradcheck {
            dims,
            heads,
            layers,
            seed,
            common,
        } => c::gradcheck(&common, &dims, heads, layers, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.diagnostic());
            return ExitCode::from(err.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.code())
        }
    }
}
