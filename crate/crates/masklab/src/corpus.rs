//! Corpora of generated or ingested token sequences, JSON-lines storage,
//! and the synthetic Markov data source used as the default dataset.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::DecodeTrace;
use crate::dist::TabularJoint;
use crate::error::{Error, Result};
use crate::rng::sample_index;
use crate::vocab::{Sequence, TokenId, Vocabulary};

/// One sample: the conditioning prompt, the generated (or ingested)
/// response tokens, and optionally the decode trace that produced it.
/// Sample ids are positional: the line number in corpus order, from 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSample {
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<DecodeTrace>,
}

impl CorpusSample {
    /// Prompt and response concatenated.
    pub fn full_tokens(&self) -> Vec<TokenId> {
        let mut out = self.prompt.clone();
        out.extend_from_slice(&self.tokens);
        out
    }
}

/// An ordered collection of samples.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn new(samples: Vec<CorpusSample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[CorpusSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for sample in &self.samples {
            serde_json::to_writer(&mut w, sample)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    /// Reads a token-id corpus; errors carry 1-based line numbers.
    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (idx, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: CorpusSample =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { samples })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }

    /// Ingests whitespace-tokenized plain text, one sample per line.
    /// Token ids are assigned in first-appearance order; returns the built
    /// vocabulary alongside the corpus.
    pub fn ingest_text<R: Read>(r: R) -> Result<(Self, Vocabulary, Vec<String>)> {
        let mut words: Vec<String> = Vec::new();
        let mut ids: std::collections::HashMap<String, TokenId> = std::collections::HashMap::new();
        let mut samples = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            let tokens: Vec<TokenId> = line
                .split_whitespace()
                .map(|w| {
                    *ids.entry(w.to_string()).or_insert_with(|| {
                        words.push(w.to_string());
                        (words.len() - 1) as TokenId
                    })
                })
                .collect();
            if tokens.is_empty() {
                continue;
            }
            samples.push(CorpusSample {
                prompt: Vec::new(),
                tokens,
                trace: None,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = Vocabulary::new(words.len() as u32)?;
        Ok((Self { samples }, vocab, words))
    }
}

/// A seeded first-order Markov chain over a small alphabet with a
/// designated separator token, giving corpora nontrivial sentence and
/// document structure. All transition entries are strictly positive, so
/// every context has positive probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovSource {
    vocab: Vocabulary,
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

impl MarkovSource {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, vocab: Vocabulary) -> Result<Self> {
        let v = vocab.size();
        if initial.len() != v || transition.len() != v {
            return Err(Error::ShapeMismatch(format!(
                "initial/transition size must be {v}"
            )));
        }
        for row in std::iter::once(&initial).chain(transition.iter()) {
            let sum: f64 = row.iter().sum();
            if row.len() != v || row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution(
                    "markov rows must be probability vectors".into(),
                ));
            }
        }
        Ok(Self {
            vocab,
            initial,
            transition,
        })
    }

    /// The default synthetic dataset: eight tokens where 0..=2 and 3..=5
    /// form two sticky topic groups, 6 is a shared connective, and 7 is the
    /// sentence separator that encourages topic switches.
    pub fn synthetic(seed: u64) -> Self {
        use crate::rng::stream_rng;
        use rand::RngExt;
        let v = 8usize;
        let sep = 7u32;
        let topic = |t: usize| -> Option<usize> {
            match t {
                0..=2 => Some(0),
                3..=5 => Some(1),
                _ => None,
            }
        };
        let mut rng = stream_rng(seed, 0);
        let mut rows = Vec::with_capacity(v);
        for from in 0..v {
            let mut row: Vec<f64> = (0..v).map(|_| 0.05 + rng.random::<f64>()).collect();
            for (to, x) in row.iter_mut().enumerate() {
                if let (Some(a), Some(b)) = (topic(from), topic(to)) {
                    if a == b {
                        *x *= 4.0; // stay on topic
                    }
                }
                if from == sep as usize && topic(to).is_some() {
                    *x *= 2.0; // separators hand off to content
                }
                if to == sep as usize && from != sep as usize {
                    *x *= 0.8;
                }
            }
            normalize_row(&mut row);
            rows.push(row);
        }
        let mut initial: Vec<f64> = (0..v).map(|_| 0.2 + rng.random::<f64>()).collect();
        initial[sep as usize] *= 0.2;
        normalize_row(&mut initial);
        let vocab = Vocabulary::with_separator(v as u32, sep).expect("static separator");
        Self {
            vocab,
            initial,
            transition: rows,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Sequence {
        let mut tokens = Vec::with_capacity(len);
        let mut prev = sample_index(&self.initial, rng);
        tokens.push(prev as TokenId);
        for _ in 1..len {
            prev = sample_index(&self.transition[prev], rng);
            tokens.push(prev as TokenId);
        }
        Sequence::new(tokens, &self.vocab).expect("chain emits vocabulary tokens")
    }

    /// Exact chain joint over sequences of length `len`.
    pub fn to_joint(&self, len: usize, cap: u64) -> Result<TabularJoint> {
        TabularJoint::from_fn(self.vocab.size(), len, cap, |tokens| {
            let mut p = self.initial[tokens[0] as usize];
            for w in tokens.windows(2) {
                p *= self.transition[w[0] as usize][w[1] as usize];
            }
            p
        })
    }
}

fn normalize_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= sum);
    let drift: f64 = 1.0 - row.iter().sum::<f64>();
    row[0] += drift;
}
