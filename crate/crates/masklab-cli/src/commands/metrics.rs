//! `masklab metrics`: one table row per decoded grid cell with n-gram
//! entropies, exact and Monte-Carlo entropy estimates, cross-entropy
//! against sequential decoding, and the semantic metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use masklab::corpus::Corpus;
use masklab::decoding::{exact_generation_distribution, DecodeConfig};
use masklab::metrics::{
    ar_entropy_mc, coherence, cross_entropy, diversity, ngram_entropy, MetricRow,
};
use masklab::model::MemoizedModel;
use masklab::rng::derive_seed;
use masklab::stats::McEstimate;

use super::{ensure_dir, fmt_opt, write_json};
use crate::commands::decode::DecodeManifest;
use crate::config::{resolve_data, resolve_model, ExperimentConfig};
use crate::CliError;

/// Published off-the-shelf evaluation averages (3B-8B models), echoed for
/// direction only; desk-scale corpora do not reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceAverages {
    pub note: String,
    pub arm: ReferenceRow,
    pub dlm: ReferenceRow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub unigram_entropy: f64,
    pub bigram_entropy: f64,
    pub trigram_entropy: f64,
    pub coherence: f64,
    pub diversity: f64,
}

pub fn reference_averages() -> ReferenceAverages {
    ReferenceAverages {
        note: "published off-the-shelf averages, shown for direction only; \
               not reproduced at desk scale"
            .to_string(),
        arm: ReferenceRow {
            unigram_entropy: 7.316,
            bigram_entropy: 11.086,
            trigram_entropy: 12.497,
            coherence: 0.604,
            diversity: 0.589,
        },
        dlm: ReferenceRow {
            unigram_entropy: 6.793,
            bigram_entropy: 10.133,
            trigram_entropy: 11.456,
            coherence: 0.649,
            diversity: 0.597,
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub reference: ReferenceAverages,
    pub rows: Vec<MetricRow>,
}

fn want(config: &ExperimentConfig, name: &str) -> bool {
    config.metrics.is_empty() || config.metrics.iter().any(|m| m == name)
}

pub fn run(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let decode_dir = out.join("decode");
    let manifest_path = decode_dir.join("manifest.json");
    let manifest: DecodeManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| {
            CliError::Config(format!(
                "{} not found (run `masklab decode` first): {e}",
                manifest_path.display()
            ))
        })?,
    )
    .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;

    let data = resolve_data(config)?;
    let model = MemoizedModel::new(resolve_model(config, &data)?);
    let embedder = config.build_embedder()?;
    let exact_ok = manifest.prompts.iter().all(|p| p.is_empty());

    // Shared sequential reference entropy.
    let h_seq_mc = if want(config, "ar-entropy") {
        Some(
            ar_entropy_mc(
                &model,
                &manifest.prompts,
                config.decode.samples_per_prompt.max(2) * manifest.prompts.len().max(1),
                derive_seed(config.seed, 0x5e9),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?,
        )
    } else {
        None
    };
    let exact_h_seq = if want(config, "exact-entropy") && exact_ok {
        exact_generation_distribution(
            &model,
            &[],
            manifest.total_len,
            &DecodeConfig::sequential(),
            config.cap(),
        )
        .ok()
        .map(|j| j.entropy(true))
    } else {
        None
    };

    let mut rows: Vec<MetricRow> = Vec::new();
    for cell in &manifest.cells {
        let corpus = Corpus::load_jsonl(&decode_dir.join(&cell.file))?;
        let row = build_row(
            config,
            &model,
            embedder.as_ref(),
            &data.vocab,
            cell,
            &corpus,
            manifest.total_len,
            exact_ok,
            h_seq_mc,
            exact_h_seq,
        )?;
        rows.push(row);
    }

    let dir = out.join("metrics");
    ensure_dir(&dir)?;
    let report = MetricsReport {
        config: config.clone(),
        reference: reference_averages(),
        rows,
    };
    write_json(&dir.join("metrics.json"), &report)?;
    write_csv(&dir.join("metrics.csv"), &report)?;
    println!("wrote {}", dir.join("metrics.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_row<M: masklab::model::PredictiveModel>(
    config: &ExperimentConfig,
    model: &M,
    embedder: &dyn masklab::metrics::Embedder,
    vocab: &masklab::vocab::Vocabulary,
    cell: &crate::commands::decode::ManifestCell,
    corpus: &Corpus,
    total_len: usize,
    exact_ok: bool,
    h_seq_mc: Option<McEstimate>,
    exact_h_seq: Option<f64>,
) -> Result<MetricRow, CliError> {
    let ngram = |n: usize| -> Option<f64> {
        if !want(config, "ngram") {
            return None;
        }
        ngram_entropy(corpus, n).ok()
    };

    let exact_entropy_per_token = if want(config, "exact-entropy") && exact_ok {
        exact_generation_distribution(model, &[], total_len, &cell.decode, config.cap())
            .ok()
            .map(|j| j.entropy(true))
    } else {
        None
    };

    let cross = if want(config, "cross-entropy") {
        Some(cross_entropy(corpus, model).map_err(|e| CliError::Runtime(e.to_string()))?)
    } else {
        None
    };

    let coherence_result = if want(config, "coherence") {
        match coherence(corpus, embedder, vocab) {
            Ok(r) => Some(r),
            Err(masklab::Error::CoherenceUndefined) => None,
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
    } else {
        None
    };

    let diversity_result = if want(config, "diversity") {
        Some(diversity(corpus, embedder).map_err(|e| CliError::Runtime(e.to_string()))?)
    } else {
        None
    };

    Ok(MetricRow {
        strategy: cell.strategy.clone(),
        block_length: cell.block_length,
        tau: cell.tau,
        bias_elimination: cell.bias_elimination,
        samples: corpus.len(),
        unigram_entropy: ngram(1),
        bigram_entropy: ngram(2),
        trigram_entropy: ngram(3),
        exact_entropy_per_token,
        ar_entropy: h_seq_mc.filter(|_| cell.strategy == "sequential"),
        cross_entropy: cross,
        h_seq_reference: h_seq_mc,
        exact_h_seq_reference: exact_h_seq,
        coherence: coherence_result,
        diversity: diversity_result,
    })
}

fn write_csv(path: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let r = &report.reference;
    writeln!(
        f,
        "# reference averages ({}): dlm trigram {} vs arm {}; coherence {} vs {}; diversity {} vs {}",
        r.note,
        r.dlm.trigram_entropy,
        r.arm.trigram_entropy,
        r.dlm.coherence,
        r.arm.coherence,
        r.dlm.diversity,
        r.arm.diversity
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let config_line = serde_json::to_string(&report.config)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(f, "# config: {config_line}").map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(
        f,
        "strategy,block_length,tau,bias_elim,samples,unigram_entropy,bigram_entropy,\
         trigram_entropy,exact_entropy_per_token,ar_entropy_mean,ar_entropy_stderr,\
         cross_entropy_mean,cross_entropy_stderr,h_seq_mean,h_seq_stderr,exact_h_seq,\
         coherence,coherence_used,coherence_excluded,diversity,trace_covariance"
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.strategy,
            row.block_length,
            row.tau,
            row.bias_elimination,
            row.samples,
            fmt_opt(row.unigram_entropy),
            fmt_opt(row.bigram_entropy),
            fmt_opt(row.trigram_entropy),
            fmt_opt(row.exact_entropy_per_token),
            fmt_opt(row.ar_entropy.map(|e| e.mean)),
            fmt_opt(row.ar_entropy.map(|e| e.stderr)),
            fmt_opt(row.cross_entropy.map(|e| e.mean)),
            fmt_opt(row.cross_entropy.map(|e| e.stderr)),
            fmt_opt(row.h_seq_reference.map(|e| e.mean)),
            fmt_opt(row.h_seq_reference.map(|e| e.stderr)),
            fmt_opt(row.exact_h_seq_reference),
            fmt_opt(row.coherence.map(|c| c.mean)),
            fmt_opt(row.coherence.map(|c| c.samples_used as f64)),
            fmt_opt(row.coherence.map(|c| c.samples_excluded as f64)),
            fmt_opt(row.diversity.map(|d| d.diversity)),
            fmt_opt(row.diversity.map(|d| d.trace_covariance)),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}
