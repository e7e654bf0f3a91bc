//! Corpus metrics: n-gram entropy, autoregressive entropy estimates,
//! cross-entropy between decoding strategies, and semantic coherence and
//! diversity over pluggable embedding providers.
//!
//! All embedders return unit-norm vectors, which makes the diversity
//! shortcut exact: the mean pairwise cosine similarity of independent draws
//! equals the squared norm of the mean embedding, so
//! `diversity = 1 - ||mean||^2 = tr(Cov)`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dist::TabularJoint;
use crate::error::{Error, Result};
use crate::model::PredictiveModel;
use crate::rng::{sample_index, stream_rng};
use crate::stats::McEstimate;
use crate::vocab::{MaskedSequence, TokenId, Vocabulary};

/// Identifies what is being embedded: a whole sample or one of its
/// sentences. Content-based providers ignore it; the external provider uses
/// it as the lookup key (`"<sample>"` or `"<sample>/<sentence>"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedKey {
    pub sample: usize,
    pub sentence: Option<usize>,
}

impl EmbedKey {
    pub fn sample(sample: usize) -> Self {
        Self {
            sample,
            sentence: None,
        }
    }

    pub fn sentence(sample: usize, sentence: usize) -> Self {
        Self {
            sample,
            sentence: Some(sentence),
        }
    }

    fn external_key(&self) -> String {
        match self.sentence {
            Some(s) => format!("{}/{s}", self.sample),
            None => self.sample.to_string(),
        }
    }
}

/// A deterministic text embedding provider with unit-norm outputs
/// (`||emb(.)||_2 = 1` within 1e-9) of a fixed dimension.
pub trait Embedder {
    fn dim(&self) -> usize;

    fn embed(&self, key: &EmbedKey, tokens: &[TokenId]) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Embedding(
            "embedding collapsed to the zero vector".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token-lookup embedder: the sequence embedding is the normalized mean of
/// per-token vectors from a table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEmbedder {
    dim: usize,
    vectors: HashMap<TokenId, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(dim: usize, vectors: HashMap<TokenId, Vec<f64>>) -> Result<Self> {
        for (tok, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Embedding(format!(
                    "vector for token {tok} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(Self { dim, vectors })
    }

    /// Loads the JSON table `{"dim": d, "vectors": {"<token_id>": [...]}}`.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Repr {
            dim: usize,
            vectors: HashMap<String, Vec<f64>>,
        }
        let repr: Repr = serde_json::from_reader(r)?;
        let mut vectors = HashMap::new();
        for (key, v) in repr.vectors {
            let tok: TokenId = key
                .parse()
                .map_err(|_| Error::Embedding(format!("bad token id {key:?}")))?;
            vectors.insert(tok, v);
        }
        Self::new(repr.dim, vectors)
    }
}

impl Embedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _key: &EmbedKey, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Embedding("cannot embed an empty sequence".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for &tok in tokens {
            let v = self
                .vectors
                .get(&tok)
                .ok_or_else(|| Error::Embedding(format!("token {tok} missing from table")))?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        normalize(acc)
    }
}

/// Seeded random-projection embedder over a bag of n-grams (n = 1..=max_n):
/// each window hashes to a coordinate and sign, counts accumulate, and the
/// result is normalized. Needs no external files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashProjectionEmbedder {
    dim: usize,
    seed: u64,
    max_n: usize,
}

impl HashProjectionEmbedder {
    pub fn new(dim: usize, seed: u64, max_n: usize) -> Result<Self> {
        if dim == 0 || max_n == 0 {
            return Err(Error::Embedding("dim and max_n must be positive".into()));
        }
        Ok(Self { dim, seed, max_n })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl Embedder for HashProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _key: &EmbedKey, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Embedding("cannot embed an empty sequence".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for n in 1..=self.max_n {
            if tokens.len() < n {
                break;
            }
            for window in tokens.windows(n) {
                let mut h = splitmix(self.seed ^ (n as u64).wrapping_mul(0xa076_1d64_78bd_642f));
                for &tok in window {
                    h = splitmix(h ^ (tok as u64 + 1));
                }
                let idx = (h % self.dim as u64) as usize;
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                acc[idx] += sign;
            }
        }
        normalize(acc)
    }
}

/// Precomputed embeddings ingested from a JSON-lines file
/// `{"id": ..., "vec": [...]}`, keyed by corpus sample id (`"3"`) or
/// sentence (`"3/1"`). Vectors must arrive unit-norm.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl ExternalEmbedder {
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: serde_json::Value,
            vec: Vec<f64>,
        }
        let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
            let id = match parsed.id {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let d = *dim.get_or_insert(parsed.vec.len());
            if parsed.vec.len() != d {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    message: format!("dimension {} vs {d}", parsed.vec.len()),
                });
            }
            let norm = parsed.vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    message: format!("vector norm {norm} is not 1"),
                });
            }
            vectors.insert(id, parsed.vec);
        }
        let dim = dim.ok_or(Error::EmptyCorpus)?;
        Ok(Self { dim, vectors })
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &EmbedKey, _tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.vectors
            .get(&key.external_key())
            .cloned()
            .ok_or_else(|| Error::Embedding(format!("no vector for id {:?}", key.external_key())))
    }
}

/// A sequence split into sentences at the vocabulary separator. Runs may be
/// empty (leading, trailing or doubled separators); joining the runs with
/// the separator reproduces the original sequence exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplit {
    pub sentences: Vec<Vec<TokenId>>,
}

impl SentenceSplit {
    pub fn split(tokens: &[TokenId], separator: TokenId) -> Self {
        let mut sentences = vec![Vec::new()];
        for &tok in tokens {
            if tok == separator {
                sentences.push(Vec::new());
            } else {
                sentences.last_mut().expect("nonempty").push(tok);
            }
        }
        Self { sentences }
    }

    pub fn k(&self) -> usize {
        self.sentences.len()
    }

    pub fn reconstruct(&self, separator: TokenId) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push(separator);
            }
            out.extend_from_slice(s);
        }
        out
    }
}

/// Shannon entropy (nats) of the pooled empirical distribution over all
/// length-`n` windows of the response tokens; windows never cross samples.
pub fn ngram_entropy(corpus: &Corpus, n: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if n == 0 {
        return Err(Error::NgramTooLong { n, min_len: 1 });
    }
    let min_len = corpus
        .samples()
        .iter()
        .map(|s| s.tokens.len())
        .min()
        .expect("nonempty corpus");
    if n > min_len {
        return Err(Error::NgramTooLong { n, min_len });
    }
    // Ordered map: the summation order must not depend on hash seeding,
    // or identical corpora could produce different low-order bits.
    let mut counts: std::collections::BTreeMap<&[TokenId], u64> = std::collections::BTreeMap::new();
    let mut total = 0u64;
    for sample in corpus.samples() {
        for window in sample.tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / total as f64;
        h -= p * p.ln();
    }
    Ok(h)
}

/// Outcome of the coherence metric: the conditional mean over samples that
/// split into at least two nonempty sentences, plus how many samples were
/// used and how many were excluded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub mean: f64,
    pub samples_used: usize,
    pub samples_excluded: usize,
}

/// Average cosine similarity between embeddings of adjacent sentences,
/// averaged over qualifying samples (`K >= 2`). Empty runs produced by
/// doubled or boundary separators carry no content and are dropped before
/// pairing.
pub fn coherence<E: Embedder + ?Sized>(
    corpus: &Corpus,
    embedder: &E,
    vocab: &Vocabulary,
) -> Result<CoherenceResult> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let separator = vocab.separator_id().ok_or(Error::CoherenceUndefined)?;
    let mut per_sample = Vec::new();
    let mut excluded = 0usize;
    for (sample_idx, sample) in corpus.samples().iter().enumerate() {
        let split = SentenceSplit::split(&sample.tokens, separator);
        let sentences: Vec<(usize, &Vec<TokenId>)> = split
            .sentences
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .collect();
        if sentences.len() < 2 {
            excluded += 1;
            continue;
        }
        let embedded: Vec<Vec<f64>> = sentences
            .iter()
            .map(|(sent_idx, s)| embedder.embed(&EmbedKey::sentence(sample_idx, *sent_idx), s))
            .collect::<Result<_>>()?;
        let mut acc = 0.0;
        for pair in embedded.windows(2) {
            acc += dot(&pair[0], &pair[1]);
        }
        per_sample.push(acc / (embedded.len() - 1) as f64);
    }
    if per_sample.is_empty() {
        return Err(Error::CoherenceUndefined);
    }
    Ok(CoherenceResult {
        mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        samples_used: per_sample.len(),
        samples_excluded: excluded,
    })
}

/// Outcome of the diversity metric, with the trace-of-covariance value
/// computed independently for the identity check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiversityResult {
    pub diversity: f64,
    pub trace_covariance: f64,
}

/// One minus the average pairwise cosine similarity of sample embeddings,
/// computed through the mean-embedding identity `1 - ||mean||^2`. The
/// trace of the embedding covariance is accumulated separately and must
/// agree for unit-norm embeddings.
pub fn diversity<E: Embedder + ?Sized>(corpus: &Corpus, embedder: &E) -> Result<DiversityResult> {
    if corpus.len() < 2 {
        return Err(Error::Embedding(
            "diversity needs at least two samples".into(),
        ));
    }
    let dim = embedder.dim();
    let mut mean = vec![0.0; dim];
    let mut embeddings = Vec::with_capacity(corpus.len());
    for (sample_idx, sample) in corpus.samples().iter().enumerate() {
        let z = embedder.embed(&EmbedKey::sample(sample_idx), &sample.tokens)?;
        for (m, x) in mean.iter_mut().zip(&z) {
            *m += x;
        }
        embeddings.push(z);
    }
    let n = corpus.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let diversity = 1.0 - dot(&mean, &mean);

    let mut trace = 0.0;
    for z in &embeddings {
        for (zi, mi) in z.iter().zip(&mean) {
            trace += (zi - mi) * (zi - mi);
        }
    }
    trace /= n;
    Ok(DiversityResult {
        diversity,
        trace_covariance: trace,
    })
}

/// Drops samples whose longest single-token run exceeds
/// `max_run_fraction` of their length; returns the kept corpus and the
/// number dropped.
pub fn filter_degenerate(corpus: &Corpus, max_run_fraction: f64) -> (Corpus, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for sample in corpus.samples() {
        let mut longest = 0usize;
        let mut run = 0usize;
        let mut prev: Option<TokenId> = None;
        for &tok in &sample.tokens {
            run = if prev == Some(tok) { run + 1 } else { 1 };
            longest = longest.max(run);
            prev = Some(tok);
        }
        if (longest as f64) <= max_run_fraction * sample.tokens.len() as f64 {
            kept.push(sample.clone());
        } else {
            dropped += 1;
        }
    }
    (Corpus::new(kept), dropped)
}

fn sequential_context(
    prompt: &[TokenId],
    total_len: usize,
    vocab: &Vocabulary,
) -> Result<MaskedSequence> {
    let mut tokens = prompt.to_vec();
    tokens.resize(total_len, vocab.mask_id());
    MaskedSequence::new(tokens, vocab)
}

/// Monte-Carlo estimate of the sequential generation entropy per token:
/// samples left-to-right from the model and averages
/// `-(1/L) sum_i log p(x^i | x^{<i}, c)`. Samples rotate over the prompts;
/// each sample runs on its own RNG stream.
pub fn ar_entropy_mc<M: PredictiveModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::EmptySample);
    }
    let vocab = model.vocab().clone();
    let total_len = model.seq_len();
    let empty: Vec<Vec<TokenId>> = vec![Vec::new()];
    let prompts = if prompts.is_empty() { &empty } else { prompts };
    let mut values = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let prompt = &prompts[s % prompts.len()];
        let mut rng = stream_rng(seed, s as u64);
        let mut ctx = sequential_context(prompt, total_len, &vocab)?;
        let mut acc = 0.0;
        for i in prompt.len()..total_len {
            let p = model.predict_one(&ctx, i)?;
            let tok = sample_index(&p, &mut rng);
            if p[tok] <= 0.0 {
                return Err(Error::ZeroProbabilityToken {
                    sample: s,
                    position: i,
                    token: tok as TokenId,
                });
            }
            acc -= p[tok].ln();
            ctx.set_token(i, tok as TokenId);
        }
        values.push(acc / (total_len - prompt.len()) as f64);
    }
    McEstimate::from_samples(&values)
}

/// Monte-Carlo cross-entropy per token between the corpus distribution and
/// the model's sequential decoding distribution:
/// `-(1/L) log p_seq(x | c)` averaged over corpus samples.
pub fn cross_entropy<M: PredictiveModel + ?Sized>(
    corpus: &Corpus,
    model: &M,
) -> Result<McEstimate> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = model.vocab().clone();
    let total_len = model.seq_len();
    let mut values = Vec::with_capacity(corpus.len());
    for (sample_idx, sample) in corpus.samples().iter().enumerate() {
        if sample.prompt.len() + sample.tokens.len() != total_len {
            return Err(Error::ShapeMismatch(format!(
                "sample {sample_idx} has length {}, model wants {total_len}",
                sample.prompt.len() + sample.tokens.len()
            )));
        }
        let mut ctx = sequential_context(&sample.prompt, total_len, &vocab)?;
        let mut acc = 0.0;
        for (offset, &tok) in sample.tokens.iter().enumerate() {
            let i = sample.prompt.len() + offset;
            let p = model.predict_one(&ctx, i)?;
            let mass = p[tok as usize];
            if mass <= 0.0 {
                return Err(Error::ZeroProbabilityToken {
                    sample: sample_idx,
                    position: i,
                    token: tok,
                });
            }
            acc -= mass.ln();
            ctx.set_token(i, tok);
        }
        values.push(acc / sample.tokens.len() as f64);
    }
    McEstimate::from_samples(&values)
}

/// Exact per-token cross-entropy `H(p, q) = -(1/L) sum_x p(x) ln q(x)`
/// between two enumerated generation distributions of identical shape.
pub fn exact_cross_entropy(p: &TabularJoint, q: &TabularJoint) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() || p.len() != q.len() {
        return Err(Error::ShapeMismatch(
            "cross-entropy needs identically shaped joints".into(),
        ));
    }
    let mut h = 0.0;
    for (pi, qi) in p.probs().iter().zip(q.probs()) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(Error::InvalidDistribution(
                    "cross-entropy undefined: q assigns zero where p is positive".into(),
                ));
            }
            h -= pi * qi.ln();
        }
    }
    Ok(h / p.len() as f64)
}

/// One metrics row, as emitted per (strategy, block length) grid cell.
/// Every Monte-Carlo value carries its standard error via [`McEstimate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub block_length: usize,
    pub tau: f64,
    pub bias_elimination: bool,
    pub samples: usize,
    pub unigram_entropy: Option<f64>,
    pub bigram_entropy: Option<f64>,
    pub trigram_entropy: Option<f64>,
    pub exact_entropy_per_token: Option<f64>,
    pub ar_entropy: Option<McEstimate>,
    pub cross_entropy: Option<McEstimate>,
    pub h_seq_reference: Option<McEstimate>,
    pub exact_h_seq_reference: Option<f64>,
    pub coherence: Option<CoherenceResult>,
    pub diversity: Option<DiversityResult>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSample;
    use crate::decoding::{decode_corpus, exact_generation_distribution, DecodeConfig, StrategyKind};
    use crate::dist::FactorizedDist;
    use crate::model::{OracleCausal, OracleFactorized};
    use crate::dist::entropy;
    use crate::rng::root_rng;
    use rand::RngExt;

    fn sample(tokens: Vec<TokenId>) -> CorpusSample {
        CorpusSample {
            prompt: vec![],
            tokens,
            trace: None,
        }
    }

    fn orthonormal_table(dim: usize) -> TableEmbedder {
        let mut vectors = HashMap::new();
        for t in 0..dim {
            let mut v = vec![0.0; dim];
            v[t] = 1.0;
            vectors.insert(t as TokenId, v);
        }
        TableEmbedder::new(dim, vectors).unwrap()
    }

    #[test]
    fn sentence_split_round_trips() {
        let split = SentenceSplit::split(&[1, 7, 2, 3, 7, 7, 4], 7);
        assert_eq!(split.k(), 4);
        assert_eq!(
            split.sentences,
            vec![vec![1], vec![2, 3], vec![], vec![4]]
        );
        assert_eq!(split.reconstruct(7), vec![1, 7, 2, 3, 7, 7, 4]);
        assert_eq!(SentenceSplit::split(&[1, 2], 7).k(), 1);
    }

    #[test]
    fn ngram_entropy_basics() {
        // Constant corpus: zero entropy at every order.
        let corpus = Corpus::new(vec![sample(vec![2; 6]); 4]);
        for n in 1..=3 {
            assert_eq!(ngram_entropy(&corpus, n).unwrap(), 0.0);
        }
        // Unigram counts (3, 1): direct formula.
        let corpus = Corpus::new(vec![sample(vec![0, 0]), sample(vec![0, 1])]);
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((ngram_entropy(&corpus, 1).unwrap() - expect).abs() < 1e-14);

        assert!(matches!(
            ngram_entropy(&Corpus::default(), 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            ngram_entropy(&corpus, 3),
            Err(Error::NgramTooLong { .. })
        ));
    }

    #[test]
    fn ngram_entropy_is_permutation_invariant() {
        let a = Corpus::new(vec![
            sample(vec![0, 1, 2]),
            sample(vec![2, 2, 0]),
            sample(vec![1, 0, 1]),
        ]);
        let b = Corpus::new(vec![
            sample(vec![1, 0, 1]),
            sample(vec![0, 1, 2]),
            sample(vec![2, 2, 0]),
        ]);
        for n in 1..=2 {
            let (ha, hb) = (ngram_entropy(&a, n).unwrap(), ngram_entropy(&b, n).unwrap());
            assert_eq!(ha.to_bits(), hb.to_bits());
        }
    }

    #[test]
    fn plug_in_unigram_entropy_converges() {
        // Large i.i.d. corpus from q: the empirical unigram entropy
        // approaches H(q) within 0.01 at one million tokens.
        let q = [0.5, 0.2, 0.2, 0.1];
        let mut rng = root_rng(42);
        let mut samples = Vec::new();
        for _ in 0..10_000 {
            let tokens: Vec<TokenId> =
                (0..100).map(|_| sample_index(&q, &mut rng) as TokenId).collect();
            samples.push(sample(tokens));
        }
        let corpus = Corpus::new(samples);
        let h = ngram_entropy(&corpus, 1).unwrap();
        assert!((h - entropy(&q)).abs() < 0.01, "{h} vs {}", entropy(&q));
    }

    #[test]
    fn ngram_entropy_respects_upper_bound() {
        let model = OracleFactorized::new(
            FactorizedDist::new(vec![vec![0.5, 0.5]; 4]).unwrap(),
        );
        let corpus = decode_corpus(
            &model,
            &[vec![]],
            4,
            &DecodeConfig::new(StrategyKind::Random, 2),
            200,
            false,
        )
        .unwrap();
        for n in 1..=3usize {
            let h = ngram_entropy(&corpus, n).unwrap();
            assert!(h >= 0.0 && h <= n as f64 * 2.0f64.ln() + 1e-12);
        }
    }

    #[test]
    fn coherence_of_identical_sentences_is_one() {
        let vocab = Vocabulary::with_separator(8, 7).unwrap();
        let embedder = HashProjectionEmbedder::new(16, 3, 2).unwrap();
        let corpus = Corpus::new(vec![sample(vec![1, 2, 7, 1, 2, 7, 1, 2]); 3]);
        let r = coherence(&corpus, &embedder, &vocab).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.samples_used, 3);
        assert_eq!(r.samples_excluded, 0);
    }

    #[test]
    fn coherence_of_orthogonal_sentences_is_zero() {
        let vocab = Vocabulary::with_separator(8, 7).unwrap();
        let embedder = orthonormal_table(8);
        let corpus = Corpus::new(vec![sample(vec![0, 7, 1, 7, 0, 7, 1])]);
        let r = coherence(&corpus, &embedder, &vocab).unwrap();
        assert!(r.mean.abs() < 1e-12);
    }

    #[test]
    fn coherence_requires_a_multi_sentence_sample() {
        let vocab = Vocabulary::with_separator(8, 7).unwrap();
        let embedder = orthonormal_table(8);
        // Only empty second runs: trailing separator does not qualify.
        let corpus = Corpus::new(vec![sample(vec![0, 1, 7]), sample(vec![2, 2])]);
        assert!(matches!(
            coherence(&corpus, &embedder, &vocab),
            Err(Error::CoherenceUndefined)
        ));
    }

    #[test]
    fn coherence_matches_double_loop_reference() {
        let vocab = Vocabulary::with_separator(8, 7).unwrap();
        let embedder = HashProjectionEmbedder::new(12, 9, 2).unwrap();
        let source = crate::corpus::MarkovSource::synthetic(5);
        let mut rng = root_rng(31);
        let samples: Vec<CorpusSample> = (0..40)
            .map(|_| sample(source.sample(12, &mut rng).tokens().to_vec()))
            .collect();
        let corpus = Corpus::new(samples);
        let got = coherence(&corpus, &embedder, &vocab).unwrap();

        // Naive reference: double loop over samples and adjacent pairs.
        let mut acc = 0.0;
        let mut used = 0usize;
        for (idx, s) in corpus.samples().iter().enumerate() {
            let split = SentenceSplit::split(&s.tokens, 7);
            let sentences: Vec<(usize, &Vec<TokenId>)> = split
                .sentences
                .iter()
                .enumerate()
                .filter(|(_, x)| !x.is_empty())
                .collect();
            if sentences.len() < 2 {
                continue;
            }
            let mut total = 0.0;
            for w in 0..sentences.len() - 1 {
                let a = embedder
                    .embed(&EmbedKey::sentence(idx, sentences[w].0), sentences[w].1)
                    .unwrap();
                let b = embedder
                    .embed(&EmbedKey::sentence(idx, sentences[w + 1].0), sentences[w + 1].1)
                    .unwrap();
                total += dot(&a, &b);
            }
            acc += total / (sentences.len() - 1) as f64;
            used += 1;
        }
        assert!(used > 0);
        assert!((got.mean - acc / used as f64).abs() < 1e-12);
        assert_eq!(got.samples_used, used);
        // Cosine of unit vectors stays in [-1, 1].
        assert!(got.mean >= -1.0 - 1e-12 && got.mean <= 1.0 + 1e-12);
    }

    #[test]
    fn diversity_identities() {
        // Identical embeddings: zero diversity.
        let embedder = orthonormal_table(4);
        let corpus = Corpus::new(vec![sample(vec![2]); 5]);
        let r = diversity(&corpus, &embedder).unwrap();
        assert!(r.diversity.abs() < 1e-12);
        assert!(r.trace_covariance.abs() < 1e-12);

        // d samples spread over an orthonormal set: 1 - 1/d.
        let d = 4;
        let corpus = Corpus::new((0..d).map(|t| sample(vec![t as TokenId])).collect());
        let r = diversity(&corpus, &embedder).unwrap();
        assert!((r.diversity - (1.0 - 1.0 / d as f64)).abs() < 1e-12);

        assert!(diversity(&Corpus::new(vec![sample(vec![0])]), &embedder).is_err());
    }

    #[test]
    fn diversity_equals_trace_of_covariance_on_random_corpora() {
        let embedder = HashProjectionEmbedder::new(24, 11, 2).unwrap();
        let source = crate::corpus::MarkovSource::synthetic(2);
        let mut rng = root_rng(12);
        for trial in 0..10 {
            let n = 5 + trial * 7;
            let samples: Vec<CorpusSample> = (0..n)
                .map(|_| sample(source.sample(10, &mut rng).tokens().to_vec()))
                .collect();
            let r = diversity(&Corpus::new(samples), &embedder).unwrap();
            assert!(
                (r.diversity - r.trace_covariance).abs() <= 1e-9,
                "{} vs {}",
                r.diversity,
                r.trace_covariance
            );
            assert!(r.diversity >= -1e-12 && r.diversity <= 2.0);
        }
    }

    #[test]
    fn embedders_return_unit_norm_vectors() {
        let providers: Vec<Box<dyn Embedder>> = vec![
            Box::new(orthonormal_table(6)),
            Box::new(HashProjectionEmbedder::new(16, 5, 3).unwrap()),
        ];
        let mut rng = root_rng(8);
        for provider in &providers {
            for s in 0..200 {
                let len = 1 + (s % 9);
                let tokens: Vec<TokenId> =
                    (0..len).map(|_| rng.random_range(0..6u32)).collect();
                let v = provider.embed(&EmbedKey::sample(s), &tokens).unwrap();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn external_embedder_reads_and_validates() {
        let file = format!(
            "{}\n{}\n",
            r#"{"id": 0, "vec": [1.0, 0.0]}"#,
            r#"{"id": "0/1", "vec": [0.0, 1.0]}"#
        );
        let embedder = ExternalEmbedder::from_reader(file.as_bytes()).unwrap();
        assert_eq!(embedder.dim(), 2);
        assert_eq!(
            embedder.embed(&EmbedKey::sample(0), &[]).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            embedder.embed(&EmbedKey::sentence(0, 1), &[]).unwrap(),
            vec![0.0, 1.0]
        );
        assert!(embedder.embed(&EmbedKey::sample(9), &[]).is_err());

        let bad = r#"{"id": 0, "vec": [2.0, 0.0]}"#;
        assert!(matches!(
            ExternalEmbedder::from_reader(bad.as_bytes()),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn table_embedder_loads_the_documented_format() {
        let file = r#"{"dim": 2, "vectors": {"0": [1.0, 0.0], "1": [0.0, 2.0]}}"#;
        let embedder = TableEmbedder::from_reader(file.as_bytes()).unwrap();
        let v = embedder.embed(&EmbedKey::sample(0), &[1]).unwrap();
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(embedder.embed(&EmbedKey::sample(0), &[5]).is_err());
    }

    #[test]
    fn ar_entropy_of_deterministic_model_is_zero() {
        let f = FactorizedDist::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let model = OracleFactorized::new(f);
        let est = ar_entropy_mc(&model, &[], 50, 3).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn ar_entropy_of_uniform_model_is_log_two() {
        let f = FactorizedDist::new(vec![vec![0.5, 0.5]; 3]).unwrap();
        let model = OracleFactorized::new(f);
        let est = ar_entropy_mc(&model, &[], 400, 7).unwrap();
        // Every token contributes exactly ln 2, so stderr is zero.
        assert!((est.mean - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ar_entropy_matches_enumerated_generation_entropy() {
        let mut rng = root_rng(9);
        let marginals: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut q: Vec<f64> = (0..2).map(|_| rng.random::<f64>() + 0.1).collect();
                let s: f64 = q.iter().sum();
                q.iter_mut().for_each(|x| *x /= s);
                let drift: f64 = 1.0 - q.iter().sum::<f64>();
                q[0] += drift;
                q
            })
            .collect();
        let model = OracleFactorized::new(FactorizedDist::new(marginals).unwrap());
        let exact = exact_generation_distribution(
            &model,
            &[],
            3,
            &DecodeConfig::sequential(),
            1 << 20,
        )
        .unwrap()
        .entropy(true);
        let est = ar_entropy_mc(&model, &[], 3000, 13).unwrap();
        assert!(
            est.within(exact, 3.0),
            "{} +- {} vs exact {exact}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn self_cross_entropy_matches_ar_entropy() {
        let source = crate::corpus::MarkovSource::synthetic(1);
        let joint = source.to_joint(4, 1 << 22).unwrap();
        let model = OracleCausal::new(joint);
        let cfg = DecodeConfig::sequential().with_seed(21);
        let corpus = decode_corpus(&model, &[vec![]], 4, &cfg, 1500, false).unwrap();
        let ce = cross_entropy(&corpus, &model).unwrap();
        let h = ar_entropy_mc(&model, &[], 1500, 22).unwrap();
        let gap = (ce.mean - h.mean).abs();
        let sigma = (ce.stderr.powi(2) + h.stderr.powi(2)).sqrt();
        assert!(gap < 3.0 * sigma, "gap {gap} vs sigma {sigma}");
    }

    #[test]
    fn cross_entropy_matches_exact_enumeration_for_low_confidence() {
        // Corpus from the biased strategy, scored against the sequential
        // distribution of the same oracle; compare to the enumerated value.
        let f = FactorizedDist::new(vec![vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        let model = OracleFactorized::new(f.clone());
        let lcr_cfg = DecodeConfig::new(StrategyKind::LowConfidence, 2).with_seed(17);
        let corpus = decode_corpus(&model, &[vec![]], 2, &lcr_cfg, 4000, false).unwrap();
        let mc = cross_entropy(&corpus, &model).unwrap();

        let p_lcr =
            exact_generation_distribution(&model, &[], 2, &lcr_cfg, 1 << 20).unwrap();
        let p_seq = f.to_joint(100).unwrap();
        let exact = exact_cross_entropy(&p_lcr, &p_seq).unwrap();
        assert!(
            mc.within(exact, 3.0),
            "{} +- {} vs exact {exact}",
            mc.mean,
            mc.stderr
        );

        // Gibbs: the strategy's own entropy is bounded by the cross-entropy.
        let h_lcr = p_lcr.entropy(true);
        assert!(h_lcr <= exact + 1e-12);
    }

    #[test]
    fn cross_entropy_flags_zero_probability_tokens() {
        let f = FactorizedDist::new(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let model = OracleFactorized::new(f);
        let corpus = Corpus::new(vec![sample(vec![1, 0])]);
        match cross_entropy(&corpus, &model) {
            Err(Error::ZeroProbabilityToken {
                sample: 0,
                position: 0,
                token: 1,
            }) => {}
            other => panic!("expected zero-probability error, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_filter_drops_long_runs() {
        let corpus = Corpus::new(vec![
            sample(vec![1, 1, 1, 1, 1, 2]),
            sample(vec![0, 1, 2, 0, 1, 2]),
        ]);
        let (kept, dropped) = filter_degenerate(&corpus, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, 1);
        assert_eq!(kept.samples()[0].tokens, vec![0, 1, 2, 0, 1, 2]);
    }
}
