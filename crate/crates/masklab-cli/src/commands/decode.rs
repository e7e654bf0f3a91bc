//! `masklab decode`: run the strategy-by-block-length grid and write one
//! JSON-lines corpus per cell plus a manifest embedding the resolved
//! config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use masklab::decoding::{decode_corpus, DecodeConfig};
use masklab::model::MemoizedModel;
use masklab::vocab::TokenId;

use super::{cell_file, ensure_dir, write_json};
use crate::config::{build_prompts, resolve_data, resolve_model, ExperimentConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub strategy: String,
    #[serde(rename = "block-length")]
    pub block_length: usize,
    pub steps: usize,
    pub tau: f64,
    #[serde(rename = "bias-elim")]
    pub bias_elimination: bool,
    pub seed: u64,
    pub samples: usize,
    pub file: String,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeManifest {
    pub config: ExperimentConfig,
    pub total_len: usize,
    pub prompts: Vec<Vec<TokenId>>,
    pub cells: Vec<ManifestCell>,
}

pub fn run(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = resolve_data(config)?;
    let model = MemoizedModel::new(resolve_model(config, &data)?);
    let prompts = build_prompts(config, &data)?;
    let grid = config.decode_grid()?;

    let dir = out.join("decode");
    ensure_dir(&dir)?;

    let mut cells = Vec::new();
    for cfg in &grid {
        let corpus = decode_corpus(
            &model,
            &prompts,
            data.length,
            cfg,
            config.decode.samples_per_prompt,
            config.decode.retain_traces,
        )?;
        let file = cell_file(cfg.strategy.name(), cfg.block_length, cfg.bias_elimination);
        corpus.save_jsonl(&dir.join(&file))?;
        cells.push(ManifestCell {
            strategy: cfg.strategy.name().to_string(),
            block_length: cfg.block_length,
            steps: cfg.steps,
            tau: cfg.tau,
            bias_elimination: cfg.bias_elimination,
            seed: cfg.seed,
            samples: corpus.len(),
            file: file.display().to_string(),
            decode: cfg.clone(),
        });
        println!(
            "decoded {:>5} samples  strategy={} B={}{}",
            cells.last().expect("just pushed").samples,
            cfg.strategy.name(),
            cfg.block_length,
            if cfg.bias_elimination { " bias-elim" } else { "" }
        );
    }

    let manifest = DecodeManifest {
        config: config.clone(),
        total_len: data.length,
        prompts,
        cells,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {}", dir.join("manifest.json").display());
    Ok(())
}
