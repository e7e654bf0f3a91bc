//! `masklab ingest`: import a corpus file into the canonical JSON-lines
//! form, building a vocabulary for plain-text input.

use std::path::Path;

use serde::Serialize;

use masklab::corpus::Corpus;

use super::{ensure_dir, write_json};
use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Serialize)]
struct VocabInfo {
    size: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    words: Option<Vec<String>>,
}

pub fn run(
    _config: &ExperimentConfig,
    out: &Path,
    input: &Path,
    mode: &str,
) -> Result<(), CliError> {
    let map_err = |e: masklab::Error| match e {
        masklab::Error::EmptyCorpus | masklab::Error::MalformedLine { .. } => {
            CliError::Config(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    };
    let file = std::fs::File::open(input)
        .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;

    let (corpus, vocab_info) = match mode {
        "token-ids" => {
            let corpus = Corpus::read_jsonl(file).map_err(map_err)?;
            let max_token = corpus
                .samples()
                .iter()
                .flat_map(|s| s.prompt.iter().chain(s.tokens.iter()))
                .max()
                .copied()
                .unwrap_or(0);
            (
                corpus,
                VocabInfo {
                    size: max_token + 1,
                    words: None,
                },
            )
        }
        "text" => {
            let (corpus, vocab, words) = Corpus::ingest_text(file).map_err(map_err)?;
            (
                corpus,
                VocabInfo {
                    size: vocab.size() as u32,
                    words: Some(words),
                },
            )
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown ingest mode {other:?} (expected token-ids or text)"
            )))
        }
    };

    let dir = out.join("ingest");
    ensure_dir(&dir)?;
    corpus.save_jsonl(&dir.join("corpus.jsonl"))?;
    write_json(&dir.join("vocab.json"), &vocab_info)?;
    println!(
        "ingested {} samples over {} tokens into {}",
        corpus.len(),
        vocab_info.size,
        dir.display()
    );
    Ok(())
}
