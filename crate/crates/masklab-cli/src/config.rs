//! Experiment configuration: a single JSON document plus flag overrides.
//! Every run is fully determined by the resolved config and its seeds, and
//! every report embeds the resolved config verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use masklab::corpus::{Corpus, MarkovSource};
use masklab::decoding::{DecodeConfig, StrategyKind};
use masklab::dist::{FactorizedDist, TabularJoint};
use masklab::metrics::{Embedder, ExternalEmbedder, HashProjectionEmbedder, TableEmbedder};
use masklab::model::{OracleCausal, OracleFactorized, OraclePosterior, PredictiveModel};
use masklab::objectives::{ObjectiveSpec, TabularConditionalModel};
use masklab::train::TrainableModel;
use masklab::vocab::{TokenId, Vocabulary, DEFAULT_ENUMERATION_CAP};

use crate::CliError;

/// Where the data distribution or corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Seeded first-order Markov chain over eight tokens with a separator.
    Markov { seed: u64, length: usize },
    /// Factorized distribution from a JSON file `{"marginals": [[...]]}`.
    Factorized { path: PathBuf },
    /// Factorized distribution given inline.
    FactorizedInline { marginals: Vec<Vec<f64>> },
    /// Full joint table from a JSON file `{"V":..,"L":..,"probs":[..]}`.
    Joint { path: PathBuf },
    /// Token-id corpus in JSON-lines form.
    Corpus { path: PathBuf },
    /// Whitespace-tokenized plain text, one sample per line.
    Text { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Markov { seed: 7, length: 6 }
    }
}

/// Which predictive model drives decoding and metrics.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelChoice {
    /// Marginal oracle; requires a factorized data source.
    OracleFactorized,
    /// Exact posterior oracle over the data joint.
    #[default]
    OraclePosterior,
    /// Exact next-token oracle over the data joint.
    OracleCausal,
    /// A serialized checkpoint (trainable or tabular model).
    Checkpoint { path: PathBuf },
}

/// Decode grid settings; the scalar keys mirror [`DecodeConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DecodeSection {
    pub strategies: Vec<String>,
    pub block_lengths: Vec<usize>,
    /// Steps per block; `null` means `N = B`.
    pub steps: Option<usize>,
    pub tau: f64,
    pub bias_elim: bool,
    pub seed: u64,
    pub prompt_length: usize,
    pub num_prompts: usize,
    pub samples_per_prompt: usize,
    pub retain_traces: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            strategies: vec![
                "sequential".into(),
                "low_confidence".into(),
                "dynamic_low_confidence".into(),
                "high_entropy".into(),
                "random".into(),
            ],
            block_lengths: vec![1, 2],
            steps: None,
            tau: 0.9,
            bias_elim: false,
            seed: 0,
            prompt_length: 0,
            num_prompts: 1,
            samples_per_prompt: 500,
            retain_traces: false,
        }
    }
}

/// Embedding provider selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderChoice {
    #[serde(rename_all = "kebab-case")]
    Hash { dim: usize, seed: u64, max_n: usize },
    Table { path: PathBuf },
    External { path: PathBuf },
}

impl Default for EmbedderChoice {
    fn default() -> Self {
        EmbedderChoice::Hash {
            dim: 16,
            seed: 1,
            max_n: 2,
        }
    }
}

/// Training settings for `masklab train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainSection {
    /// `tabular` fits per-context logit tables by exact full-batch descent;
    /// `trainable` runs Monte-Carlo SGD on the neural model.
    pub mode: TrainMode,
    pub t_min: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Gradient steps (tabular) or maximum SGD steps (trainable).
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Shared next-token-prediction stopping target; `null` derives
    /// 1.05x the causal-oracle loss from the data joint.
    pub ntp_target: Option<f64>,
    pub embed_dim: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Tabular,
    Trainable,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Tabular,
            t_min: 0.01,
            lr: 1.0,
            momentum: 0.9,
            max_steps: 600,
            batch_size: 32,
            eval_every: 25,
            ntp_target: None,
            embed_dim: 12,
            layers: 2,
        }
    }
}

/// Settings for `masklab verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct VerifySection {
    pub instances: usize,
    pub max_vocab: usize,
    pub max_len: usize,
    pub block_lengths: Vec<usize>,
    pub taus: Vec<f64>,
    /// Deliberately corrupt the selection rule (keep lowest confidence) to
    /// demonstrate the sweep catches broken decoders.
    pub corrupt: bool,
    /// Include hand-built instances with exact confidence ties.
    pub tie_instances: bool,
    pub chain_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            instances: 200,
            max_vocab: 4,
            max_len: 4,
            block_lengths: vec![1, 2, 4],
            taus: vec![0.5, 0.9, 1.0],
            corrupt: false,
            tie_instances: true,
            chain_samples: 0,
        }
    }
}

/// The complete experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub model: ModelChoice,
    pub objectives: Vec<String>,
    pub decode: DecodeSection,
    pub metrics: Vec<String>,
    pub embedder: EmbedderChoice,
    pub train: TrainSection,
    pub verify: VerifySection,
    /// Enumeration/branch cap for exact paths.
    pub cap: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn cap(&self) -> u64 {
        self.cap.unwrap_or(DEFAULT_ENUMERATION_CAP)
    }

    pub fn objective_specs(&self) -> Result<Vec<ObjectiveSpec>, CliError> {
        let codes: Vec<String> = if self.objectives.is_empty() {
            ObjectiveSpec::all().iter().map(|s| s.code()).collect()
        } else {
            self.objectives.clone()
        };
        codes
            .iter()
            .map(|c| {
                ObjectiveSpec::parse(c)
                    .map_err(|e| CliError::Config(format!("objective {c:?}: {e}")))
            })
            .collect()
    }

    /// The decode grid: one config per (strategy, block length).
    pub fn decode_grid(&self) -> Result<Vec<DecodeConfig>, CliError> {
        let mut grid = Vec::new();
        for name in &self.decode.strategies {
            let strategy = StrategyKind::parse(name)
                .map_err(|e| CliError::Config(e.to_string()))?;
            for &block in &self.decode.block_lengths {
                if strategy == StrategyKind::Sequential && block != 1 {
                    continue;
                }
                let mut cfg = DecodeConfig::new(strategy, block).with_tau(self.decode.tau);
                cfg.steps = self.decode.steps.unwrap_or(block);
                cfg.bias_elimination = self.decode.bias_elim;
                cfg.seed = masklab::rng::derive_seed(
                    self.seed ^ self.decode.seed,
                    grid.len() as u64,
                );
                cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
                grid.push(cfg);
            }
        }
        Ok(grid)
    }

    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        match &self.embedder {
            EmbedderChoice::Hash { dim, seed, max_n } => Ok(Box::new(
                HashProjectionEmbedder::new(*dim, *seed, *max_n)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            )),
            EmbedderChoice::Table { path } => {
                let file = std::fs::File::open(path).map_err(|e| {
                    CliError::Config(format!("embedding table {}: {e}", path.display()))
                })?;
                Ok(Box::new(
                    TableEmbedder::from_reader(file)
                        .map_err(|e| CliError::Config(e.to_string()))?,
                ))
            }
            EmbedderChoice::External { path } => {
                let file = std::fs::File::open(path).map_err(|e| {
                    CliError::Config(format!("external embeddings {}: {e}", path.display()))
                })?;
                Ok(Box::new(
                    ExternalEmbedder::from_reader(file)
                        .map_err(|e| CliError::Config(e.to_string()))?,
                ))
            }
        }
    }
}

/// The data source resolved into concrete distributions.
pub struct ResolvedData {
    pub vocab: Vocabulary,
    pub length: usize,
    pub factors: Option<FactorizedDist>,
    pub joint: Option<TabularJoint>,
}

impl ResolvedData {
    pub fn joint(&self) -> Result<&TabularJoint, CliError> {
        self.joint.as_ref().ok_or_else(|| {
            CliError::Config("this command needs an enumerable data distribution".into())
        })
    }
}

pub fn resolve_data(config: &ExperimentConfig) -> Result<ResolvedData, CliError> {
    let cap = config.cap();
    let runtime = |e: masklab::Error| CliError::Runtime(e.to_string());
    match &config.data {
        DataSource::Markov { seed, length } => {
            let source = MarkovSource::synthetic(*seed);
            let joint = source.to_joint(*length, cap).map_err(runtime)?;
            Ok(ResolvedData {
                vocab: source.vocab().clone(),
                length: *length,
                factors: None,
                joint: Some(joint),
            })
        }
        DataSource::Factorized { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let factors: FactorizedDist = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            resolve_factorized(factors, cap)
        }
        DataSource::FactorizedInline { marginals } => {
            let factors = FactorizedDist::new(marginals.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            resolve_factorized(factors, cap)
        }
        DataSource::Joint { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let joint: TabularJoint = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(ResolvedData {
                vocab: Vocabulary::new(joint.vocab_size() as u32)
                    .map_err(|e| CliError::Config(e.to_string()))?,
                length: joint.len(),
                factors: None,
                joint: Some(joint),
            })
        }
        DataSource::Corpus { path } => {
            let corpus = Corpus::load_jsonl(path).map_err(|e| match e {
                masklab::Error::EmptyCorpus => CliError::Config("empty corpus".into()),
                masklab::Error::MalformedLine { .. } => CliError::Config(e.to_string()),
                other => CliError::Runtime(other.to_string()),
            })?;
            resolve_corpus(corpus, cap)
        }
        DataSource::Text { path } => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let (corpus, _vocab, _words) = Corpus::ingest_text(file).map_err(|e| match e {
                masklab::Error::EmptyCorpus => CliError::Config("empty corpus".into()),
                other => CliError::Config(other.to_string()),
            })?;
            resolve_corpus(corpus, cap)
        }
    }
}

fn resolve_factorized(factors: FactorizedDist, cap: u64) -> Result<ResolvedData, CliError> {
    let joint = factors
        .to_joint(cap)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(ResolvedData {
        vocab: Vocabulary::new(factors.vocab_size() as u32)
            .map_err(|e| CliError::Config(e.to_string()))?,
        length: factors.len(),
        factors: Some(factors),
        joint: Some(joint),
    })
}

/// Builds the empirical joint of equal-length corpus samples.
fn resolve_corpus(corpus: Corpus, cap: u64) -> Result<ResolvedData, CliError> {
    let lengths: Vec<usize> = corpus
        .samples()
        .iter()
        .map(|s| s.prompt.len() + s.tokens.len())
        .collect();
    let length = lengths[0];
    let uniform_length = lengths.iter().all(|&l| l == length);
    let max_token = corpus
        .samples()
        .iter()
        .flat_map(|s| s.prompt.iter().chain(s.tokens.iter()))
        .max()
        .copied()
        .unwrap_or(0);
    let vocab = Vocabulary::new(max_token + 1).map_err(|e| CliError::Config(e.to_string()))?;

    let joint = if uniform_length {
        let n = corpus.len() as f64;
        let mut counts: std::collections::HashMap<Vec<TokenId>, f64> =
            std::collections::HashMap::new();
        for s in corpus.samples() {
            let mut full = s.prompt.clone();
            full.extend_from_slice(&s.tokens);
            *counts.entry(full).or_insert(0.0) += 1.0;
        }
        TabularJoint::from_fn(vocab.size(), length, cap, |tokens| {
            counts.get(tokens).copied().unwrap_or(0.0) / n
        })
        .ok()
    } else {
        None
    };
    Ok(ResolvedData {
        vocab,
        length,
        factors: None,
        joint,
    })
}

/// Serialized checkpoint envelope for any model kind.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Checkpoint {
    OracleFactorized(OracleFactorized),
    OraclePosterior(OraclePosterior),
    OracleCausal(OracleCausal),
    Trainable(TrainableModel),
    Tabular(TabularConditionalModel),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
    }

    pub fn into_model(self) -> Box<dyn PredictiveModel> {
        match self {
            Checkpoint::OracleFactorized(m) => Box::new(m),
            Checkpoint::OraclePosterior(m) => Box::new(m),
            Checkpoint::OracleCausal(m) => Box::new(m),
            Checkpoint::Trainable(m) => Box::new(m),
            Checkpoint::Tabular(m) => Box::new(m),
        }
    }
}

pub fn resolve_model(
    config: &ExperimentConfig,
    data: &ResolvedData,
) -> Result<Box<dyn PredictiveModel>, CliError> {
    match &config.model {
        ModelChoice::OracleFactorized => {
            let factors = data.factors.clone().ok_or_else(|| {
                CliError::Config("oracle-factorized needs a factorized data source".into())
            })?;
            Ok(Box::new(OracleFactorized::new(factors)))
        }
        ModelChoice::OraclePosterior => {
            Ok(Box::new(OraclePosterior::new(data.joint()?.clone())))
        }
        ModelChoice::OracleCausal => Ok(Box::new(OracleCausal::new(data.joint()?.clone()))),
        ModelChoice::Checkpoint { path } => Ok(Checkpoint::load(path)?.into_model()),
    }
}

/// Deterministic prompts for decoding: length-`prompt_length` prefixes
/// sampled from the data joint (or empty when length is zero).
pub fn build_prompts(
    config: &ExperimentConfig,
    data: &ResolvedData,
) -> Result<Vec<Vec<TokenId>>, CliError> {
    let n = config.decode.num_prompts.max(1);
    let plen = config.decode.prompt_length;
    if plen == 0 {
        return Ok(vec![Vec::new(); 1]);
    }
    if plen >= data.length {
        return Err(CliError::Config(format!(
            "prompt length {plen} must stay below the sequence length {}",
            data.length
        )));
    }
    let joint = data.joint()?;
    let mut rng = masklab::rng::stream_rng(masklab::rng::derive_seed(config.seed, 0x9a), 0);
    let sequences: Vec<Vec<TokenId>> = joint.iter().map(|(t, _)| t).collect();
    let mut cumulative = Vec::with_capacity(sequences.len());
    let mut acc = 0.0;
    for &p in joint.probs() {
        acc += p;
        cumulative.push(acc);
    }
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        use rand::RngExt;
        let u: f64 = rng.random();
        let idx = cumulative.partition_point(|&c| c <= u).min(sequences.len() - 1);
        prompts.push(sequences[idx][..plen].to_vec());
    }
    Ok(prompts)
}
