//! File formats, configuration loading and the exit-code contract.

use std::fs;
use std::path::Path;

use moca_core::config::SEED_ENV;
use moca_core::text::{QuestionRecord, Vocab};
use moca_core::RunConfig;
use serde::de::DeserializeOwned;

use crate::Common;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Data(_) => "data",
            Self::Numerical(_) => "numerical",
        }
    }

    /// `error code=<n> kind=<kind> message=<json string>` on one line.
    pub fn diagnostic(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("string serializes");
        format!(
            "error code={} kind={} message={msg}",
            self.code(),
            self.kind()
        )
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    /// Data error unless `numerical` says the failure was a non-finite value.
    pub fn classify(e: impl std::fmt::Display, numerical: bool) -> Self {
        if numerical {
            Self::Numerical(e.to_string())
        } else {
            Self::Data(e.to_string())
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Effective configuration: file (or defaults), then `MOCA_SEED`.
pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json(&read_text(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// First line of every emitted text artifact.
pub fn header(cfg: &RunConfig) -> String {
    format!("# moca {VERSION} seed={} config={}\n", cfg.seed, cfg.hash())
}

/// Non-blank lines that are not `#` comments, with 1-based line numbers.
pub fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("{}:{n}: {e}", path.display())))
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<QuestionRecord>, CliError> {
    let records: Vec<QuestionRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate().map_err(CliError::data)?;
    }
    Ok(records)
}

pub fn read_vocab(path: &Path) -> Result<Vocab, CliError> {
    Vocab::parse(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn parse_or_usage<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| CliError::Usage(format!("{what}: {e}")))
}
