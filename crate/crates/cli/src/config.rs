//! TOML configuration for training and evaluation: model architecture,
//! optimization schedule, and the corpus to build.

use crate::CliError;
use quire_core::model::{Corpus, ModelConfig, TrainConfig};
use quire_core::ocr::Document;
use quire_core::synth;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Top-level config file: `[model]`, `[train]`, and `[corpus]` tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

/// Where training documents come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusConfig {
    /// Synthetic reading-order grid documents.
    Grid {
        documents: usize,
        lines: usize,
        words_per_line: usize,
    },
    /// Synthetic two-column documents (each line: left words, then right).
    TwoColumn {
        documents: usize,
        lines: usize,
        words_per_side: usize,
    },
    /// Previously ingested document files.
    Ingested { paths: Vec<PathBuf> },
}

impl CorpusConfig {
    /// Token count of every synthetic document, `None` for ingested sets.
    pub fn tokens_per_document(&self) -> Option<usize> {
        match self {
            CorpusConfig::Grid {
                lines,
                words_per_line,
                ..
            } => Some(lines * words_per_line),
            CorpusConfig::TwoColumn {
                lines,
                words_per_side,
                ..
            } => Some(lines * 2 * words_per_side),
            CorpusConfig::Ingested { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            CorpusConfig::Grid {
                documents,
                lines,
                words_per_line,
            } => {
                if *documents == 0 || *lines == 0 || *words_per_line == 0 {
                    return Err("grid corpus needs documents, lines, words_per_line > 0".into());
                }
            }
            CorpusConfig::TwoColumn {
                documents,
                lines,
                words_per_side,
            } => {
                if *documents == 0 || *lines == 0 || *words_per_side == 0 {
                    return Err(
                        "two_column corpus needs documents, lines, words_per_side > 0".into()
                    );
                }
            }
            CorpusConfig::Ingested { paths } => {
                if paths.is_empty() {
                    return Err("ingested corpus needs at least one document path".into());
                }
            }
        }
        Ok(())
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("cannot read config {}: {e}", path.display())))?;
        let config: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(CliError::from_validation)?;
        self.train.validate().map_err(CliError::from_validation)?;
        self.corpus.validate().map_err(CliError::usage)?;
        if let Some(tokens) = self.corpus.tokens_per_document() {
            if tokens > self.model.max_seq_len {
                return Err(CliError::usage(format!(
                    "corpus documents have {tokens} tokens, max_seq_length is {}",
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Builds the configured corpus against an explicit model config, used
    /// when a checkpoint's embedded settings override the file's `[model]`
    /// table (the strategy decides plan shape, the vocabulary sizes ids).
    pub fn build_corpus_for(&self, model: &ModelConfig, threads: usize) -> Result<Corpus, CliError> {
        if !matches!(self.corpus, CorpusConfig::Ingested { .. }) && model.vocab_size <= 4 {
            return Err(CliError::usage(
                "synthetic corpora reserve ids 0..3, so vocab_size must exceed 4",
            ));
        }
        let strategy = &model.strategy;
        let corpus = match &self.corpus {
            CorpusConfig::Grid {
                documents,
                lines,
                words_per_line,
            } => synth::grid_corpus(
                *documents,
                *lines,
                *words_per_line,
                model.vocab_size,
                strategy,
                threads,
            ),
            CorpusConfig::TwoColumn {
                documents,
                lines,
                words_per_side,
            } => synth::two_column_corpus(
                *documents,
                *lines,
                *words_per_side,
                model.vocab_size,
                strategy,
                threads,
            ),
            CorpusConfig::Ingested { paths } => {
                let mut docs = Vec::with_capacity(paths.len());
                for path in paths {
                    let text = fs::read_to_string(path).map_err(|e| {
                        CliError::runtime(format!("cannot read document {}: {e}", path.display()))
                    })?;
                    let doc = Document::from_json(&text).map_err(|e| {
                        CliError::usage(format!("document {}: {e}", path.display()))
                    })?;
                    docs.push(doc);
                }
                Corpus::from_documents(&docs, strategy, threads)
            }
        };
        corpus.map_err(CliError::from_model)
    }
}
