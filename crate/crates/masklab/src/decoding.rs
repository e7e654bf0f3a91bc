//! Block-wise denoising generation.
//!
//! A sequence is decoded block by block, left to right. Within a block the
//! model repeatedly (a) predicts a distribution at every masked position,
//! (b) proposes one sampled token per masked position, (c) keeps a subset of
//! proposals chosen by the remasking strategy and remasks the rest. With
//! `N` target steps per block, each step decodes `B/N` positions (dynamic
//! remasking may decode more; the final step of a block may decode fewer).
//!
//! Confidence is the predicted probability of the proposed token; the
//! entropy score is the Shannon entropy of the predictive vector in nats.
//! Ties in either score break toward the lower position index. Proposals
//! are drawn at all masked positions even for the outcome-independent
//! strategies (high-entropy, random) and discarded where not kept, so
//! selection stays decorrelated from outcomes for those strategies.
//!
//! [`exact_generation_distribution`] replays the same process symbolically,
//! summing path probabilities over every stochastic branch, which turns
//! entropy claims about strategies into checkable arithmetic.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSample};
use crate::dist::{entropy, TabularJoint};
use crate::error::{Error, Result};
use crate::model::PredictiveModel;
use crate::rng::{sample_index, sample_subset, stream_rng};
use crate::vocab::{state_count, MaskedSequence, Sequence, TokenId};

/// Remasking strategy selecting which proposals survive each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Left-to-right decoding; the degenerate block length 1 case.
    Sequential,
    /// Keep the `B/N` proposals of highest confidence.
    LowConfidence,
    /// Keep every proposal with confidence strictly above `tau`, falling
    /// back to low-confidence top-`B/N` when fewer qualify.
    DynamicLowConfidence,
    /// Keep the `B/N` positions of lowest predictive entropy.
    HighEntropy,
    /// Keep a uniformly random subset of size `B/N`.
    Random,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Sequential,
        StrategyKind::LowConfidence,
        StrategyKind::DynamicLowConfidence,
        StrategyKind::HighEntropy,
        StrategyKind::Random,
    ];

    /// Confidence-based strategies select positions from sampled outcomes.
    pub fn is_confidence_based(&self) -> bool {
        matches!(
            self,
            StrategyKind::LowConfidence | StrategyKind::DynamicLowConfidence
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Sequential => "sequential",
            StrategyKind::LowConfidence => "low_confidence",
            StrategyKind::DynamicLowConfidence => "dynamic_low_confidence",
            StrategyKind::HighEntropy => "high_entropy",
            StrategyKind::Random => "random",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sequential" => Ok(StrategyKind::Sequential),
            "low_confidence" => Ok(StrategyKind::LowConfidence),
            "dynamic_low_confidence" => Ok(StrategyKind::DynamicLowConfidence),
            "high_entropy" => Ok(StrategyKind::HighEntropy),
            "random" => Ok(StrategyKind::Random),
            other => Err(Error::InvalidDecodeConfig(format!(
                "unknown strategy {other:?}"
            ))),
        }
    }
}

/// Decoding configuration. Sampling temperature is fixed at 1.0 with no
/// top-p or top-k truncation, so outputs reflect the model distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: StrategyKind,
    #[serde(rename = "block-length")]
    pub block_length: usize,
    /// Target denoising steps per block `N`; must divide the block length.
    pub steps: usize,
    /// Confidence threshold, used only by dynamic low-confidence remasking.
    pub tau: f64,
    /// Redraw kept tokens after position selection, decorrelating selection
    /// from outcomes.
    #[serde(rename = "bias-elim", default)]
    pub bias_elimination: bool,
    pub seed: u64,
    /// Diagnostic mutation: keep the lowest-confidence proposals instead of
    /// the highest. Exists so verification sweeps can prove they would
    /// catch a broken selection rule.
    #[serde(
        rename = "invert-confidence",
        default,
        skip_serializing_if = "is_false"
    )]
    pub invert_confidence: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl DecodeConfig {
    /// Config with `N = B` (one token per step target), `tau = 0.9`.
    pub fn new(strategy: StrategyKind, block_length: usize) -> Self {
        Self {
            strategy,
            block_length,
            steps: block_length,
            tau: 0.9,
            bias_elimination: false,
            seed: 0,
            invert_confidence: false,
        }
    }

    pub fn sequential() -> Self {
        Self::new(StrategyKind::Sequential, 1)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_bias_elimination(mut self, on: bool) -> Self {
        self.bias_elimination = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Positions decoded per step, `B / N`.
    pub fn keep_per_step(&self) -> usize {
        self.block_length / self.steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_length == 0 {
            return Err(Error::InvalidDecodeConfig(
                "block length must be at least 1".into(),
            ));
        }
        if self.steps == 0 || !self.block_length.is_multiple_of(self.steps) {
            return Err(Error::InvalidDecodeConfig(format!(
                "steps {} must divide block length {}",
                self.steps, self.block_length
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidDecodeConfig(format!(
                "tau {} outside (0, 1]",
                self.tau
            )));
        }
        if self.strategy == StrategyKind::Sequential && self.block_length != 1 {
            return Err(Error::InvalidDecodeConfig(
                "sequential decoding means block length 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::sequential()
    }
}

/// One denoising step as it happened: what was masked, what was proposed,
/// the scores, and which positions survived remasking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub block: usize,
    pub masked: Vec<usize>,
    pub proposals: Vec<TokenId>,
    pub confidence: Vec<f64>,
    pub entropy: Vec<f64>,
    pub kept: Vec<usize>,
}

/// Full per-sample decode history.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    /// For each absolute position, the 1-based step at which it was
    /// decoded; `None` for prompt positions.
    pub decode_step: Vec<Option<usize>>,
}

/// Selection for the outcome-dependent strategies and high-entropy; random
/// subsets are drawn by the caller. Returns kept positions in ascending
/// order. `masked` is ascending; `confidence`/`entropy_scores` align to it.
pub(crate) fn select_deterministic(
    cfg: &DecodeConfig,
    masked: &[usize],
    confidence: &[f64],
    entropy_scores: &[f64],
    keep_target: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masked.len()).collect();
    match cfg.strategy {
        StrategyKind::HighEntropy => {
            order.sort_by(|&a, &b| {
                entropy_scores[a]
                    .partial_cmp(&entropy_scores[b])
                    .expect("finite entropy")
                    .then(masked[a].cmp(&masked[b]))
            });
        }
        StrategyKind::DynamicLowConfidence => {
            let qualified: Vec<usize> = (0..masked.len())
                .filter(|&j| confidence[j] > cfg.tau)
                .collect();
            if qualified.len() >= keep_target {
                let mut kept: Vec<usize> = qualified.iter().map(|&j| masked[j]).collect();
                kept.sort_unstable();
                return kept;
            }
            sort_by_confidence(&mut order, masked, confidence, cfg.invert_confidence);
        }
        _ => sort_by_confidence(&mut order, masked, confidence, cfg.invert_confidence),
    }
    let mut kept: Vec<usize> = order[..keep_target].iter().map(|&j| masked[j]).collect();
    kept.sort_unstable();
    kept
}

fn sort_by_confidence(order: &mut [usize], masked: &[usize], confidence: &[f64], invert: bool) {
    order.sort_by(|&a, &b| {
        let (hi, lo) = if invert { (a, b) } else { (b, a) };
        confidence[hi]
            .partial_cmp(&confidence[lo])
            .expect("finite confidence")
            .then(masked[a].cmp(&masked[b]))
    });
}

fn check_prompt_and_length<M: PredictiveModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    total_len: usize,
    cfg: &DecodeConfig,
) -> Result<()> {
    cfg.validate()?;
    if total_len != model.seq_len() {
        return Err(Error::ShapeMismatch(format!(
            "total length {total_len} does not match model length {}",
            model.seq_len()
        )));
    }
    if prompt.len() >= total_len {
        return Err(Error::InvalidSequence(format!(
            "prompt length {} must be shorter than total length {total_len}",
            prompt.len()
        )));
    }
    for (position, &t) in prompt.iter().enumerate() {
        if !model.vocab().contains(t) {
            return Err(Error::InvalidToken {
                token: t,
                position,
                vocab_size: model.vocab().size() as u32,
            });
        }
    }
    let gen_len = total_len - prompt.len();
    if !gen_len.is_multiple_of(cfg.block_length) {
        return Err(Error::InvalidDecodeConfig(format!(
            "generated length {gen_len} not divisible by block length {}",
            cfg.block_length
        )));
    }
    Ok(())
}

fn validate_prediction(p: &[f64], position: usize) -> Result<()> {
    let mut sum = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "model prediction at position {position} has entry {x}"
            )));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "model prediction at position {position} sums to {sum}"
        )));
    }
    Ok(())
}

/// Samples one sequence by block-wise denoising. Prompt positions are never
/// masked. Deterministic given the RNG state.
pub fn decode_sample<M: PredictiveModel + ?Sized, R: Rng>(
    model: &M,
    prompt: &[TokenId],
    total_len: usize,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(Sequence, DecodeTrace)> {
    check_prompt_and_length(model, prompt, total_len, cfg)?;
    let vocab = model.vocab().clone();
    let mask = vocab.mask_id();
    let mut tokens: Vec<TokenId> = prompt.to_vec();
    tokens.resize(total_len, mask);

    let mut trace = DecodeTrace {
        steps: Vec::new(),
        decode_step: vec![None; total_len],
    };
    let gen_len = total_len - prompt.len();
    let num_blocks = gen_len / cfg.block_length;
    let mut step_counter = 0usize;

    for block in 0..num_blocks {
        let start = prompt.len() + block * cfg.block_length;
        let end = start + cfg.block_length;
        loop {
            let state = MaskedSequence::new(tokens.clone(), &vocab)?;
            let masked: Vec<usize> = (start..end).filter(|&i| state.is_masked(i)).collect();
            if masked.is_empty() {
                break;
            }
            step_counter += 1;
            let keep_target = cfg.keep_per_step().min(masked.len());

            let dists = model.predict(&state, &masked)?;
            for (slot, p) in dists.iter().enumerate() {
                validate_prediction(p, masked[slot])?;
            }

            // Proposals drawn in ascending position order.
            let proposals: Vec<TokenId> = dists
                .iter()
                .map(|p| sample_index(p, rng) as TokenId)
                .collect();
            let confidence: Vec<f64> = proposals
                .iter()
                .zip(&dists)
                .map(|(&v, p)| p[v as usize])
                .collect();
            let entropy_scores: Vec<f64> = dists.iter().map(|p| entropy(p)).collect();

            let kept = if cfg.strategy == StrategyKind::Random {
                sample_subset(&masked, keep_target, rng)
            } else {
                select_deterministic(cfg, &masked, &confidence, &entropy_scores, keep_target)
            };

            for &position in &kept {
                let slot = masked.binary_search(&position).expect("kept is masked");
                let value = if cfg.bias_elimination {
                    sample_index(&dists[slot], rng) as TokenId
                } else {
                    proposals[slot]
                };
                tokens[position] = value;
                trace.decode_step[position] = Some(step_counter);
            }

            trace.steps.push(StepRecord {
                block,
                masked,
                proposals,
                confidence,
                entropy: entropy_scores,
                kept,
            });
        }
    }

    debug_assert!(trace.decode_step[prompt.len()..]
        .iter()
        .all(Option::is_some));
    let seq = Sequence::new(tokens, &vocab)?;
    Ok((seq, trace))
}

/// Exact generation distribution over the generated positions, obtained by
/// summing path probabilities over every stochastic branch: proposal tuples
/// at each step, uniformly weighted subset choices for the random strategy,
/// and redraw tuples under bias elimination.
///
/// Branches whose proposal has zero predicted probability carry no mass and
/// are skipped. The result must sum to 1 within 1e-10 and is renormalized to
/// machine precision before being returned as a [`TabularJoint`].
pub fn exact_generation_distribution<M: PredictiveModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    total_len: usize,
    cfg: &DecodeConfig,
    cap: u64,
) -> Result<TabularJoint> {
    check_prompt_and_length(model, prompt, total_len, cfg)?;
    let vocab = model.vocab().clone();
    let v = vocab.size();
    let mask = vocab.mask_id();
    let gen_len = total_len - prompt.len();
    state_count(v, gen_len, cap)?;

    let mut start_tokens: Vec<TokenId> = prompt.to_vec();
    start_tokens.resize(total_len, mask);

    let mut frontier: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    frontier.insert(start_tokens, 1.0);
    let mut done: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    let mut branches: u128 = 0;
    let mut round = 0usize;

    while !frontier.is_empty() {
        round += 1;
        let mut next: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        for (tokens, mass) in std::mem::take(&mut frontier) {
            let state = MaskedSequence::new(tokens.clone(), &vocab)?;
            let block = (0..gen_len / cfg.block_length)
                .find(|b| {
                    let start = prompt.len() + b * cfg.block_length;
                    (start..start + cfg.block_length).any(|i| state.is_masked(i))
                })
                .expect("frontier states have masked positions");
            let start = prompt.len() + block * cfg.block_length;
            let masked: Vec<usize> = (start..start + cfg.block_length)
                .filter(|&i| state.is_masked(i))
                .collect();
            let keep_target = cfg.keep_per_step().min(masked.len());

            let dists = model.predict(&state, &masked)?;
            for (slot, p) in dists.iter().enumerate() {
                validate_prediction(p, masked[slot])?;
            }
            let supports: Vec<Vec<(TokenId, f64)>> = dists
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .filter(|&(_, &x)| x > 0.0)
                        .map(|(i, &x)| (i as TokenId, x))
                        .collect()
                })
                .collect();

            let mut emit = |kept: &[usize], values: &[TokenId], w: f64| {
                let mut child = tokens.clone();
                for (&position, &value) in kept.iter().zip(values) {
                    child[position] = value;
                }
                *next.entry(child).or_insert(0.0) += mass * w;
                branches += 1;
            };

            match cfg.strategy {
                StrategyKind::HighEntropy => {
                    let entropy_scores: Vec<f64> = dists.iter().map(|p| entropy(p)).collect();
                    let confidence = vec![0.0; masked.len()];
                    let kept = select_deterministic(
                        cfg,
                        &masked,
                        &confidence,
                        &entropy_scores,
                        keep_target,
                    );
                    // Selection ignores proposals, so unkept proposals
                    // marginalize out; kept values are draws from their
                    // predictive distributions whether or not redrawn.
                    let kept_supports: Vec<Vec<(TokenId, f64)>> = kept
                        .iter()
                        .map(|&pos| {
                            let slot = masked.binary_search(&pos).expect("kept is masked");
                            supports[slot].clone()
                        })
                        .collect();
                    for_each_tuple(&kept_supports, &mut |values, w| emit(&kept, values, w));
                }
                StrategyKind::Random => {
                    let subset_w = 1.0 / binomial(masked.len(), keep_target);
                    for_each_subset(masked.len(), keep_target, &mut |slots| {
                        let kept: Vec<usize> = slots.iter().map(|&s| masked[s]).collect();
                        let kept_supports: Vec<Vec<(TokenId, f64)>> =
                            slots.iter().map(|&s| supports[s].clone()).collect();
                        for_each_tuple(&kept_supports, &mut |values, w| {
                            emit(&kept, values, subset_w * w)
                        });
                    });
                }
                _ => {
                    let entropy_scores = vec![0.0; masked.len()];
                    for_each_tuple(&supports, &mut |proposal, w_tuple| {
                        let confidence: Vec<f64> = proposal
                            .iter()
                            .zip(&dists)
                            .map(|(&val, p)| p[val as usize])
                            .collect();
                        let kept = select_deterministic(
                            cfg,
                            &masked,
                            &confidence,
                            &entropy_scores,
                            keep_target,
                        );
                        if cfg.bias_elimination {
                            let kept_supports: Vec<Vec<(TokenId, f64)>> = kept
                                .iter()
                                .map(|&pos| {
                                    let slot =
                                        masked.binary_search(&pos).expect("kept is masked");
                                    supports[slot].clone()
                                })
                                .collect();
                            for_each_tuple(&kept_supports, &mut |values, w_redraw| {
                                emit(&kept, values, w_tuple * w_redraw)
                            });
                        } else {
                            let values: Vec<TokenId> = kept
                                .iter()
                                .map(|&pos| {
                                    let slot =
                                        masked.binary_search(&pos).expect("kept is masked");
                                    proposal[slot]
                                })
                                .collect();
                            emit(&kept, &values, w_tuple);
                        }
                    });
                }
            }

            if branches > cap as u128 {
                return Err(Error::BranchCapExceeded {
                    block,
                    step: round,
                    branches,
                    cap,
                });
            }
        }

        for (tokens, mass) in next {
            if tokens.iter().all(|&t| t != mask) {
                *done.entry(tokens).or_insert(0.0) += mass;
            } else {
                *frontier.entry(tokens).or_insert(0.0) += mass;
            }
        }
    }

    let mut probs = vec![0.0; v.pow(gen_len as u32)];
    for (tokens, mass) in done {
        let mut idx = 0usize;
        for &t in &tokens[prompt.len()..] {
            idx = idx * v + t as usize;
        }
        probs[idx] += mass;
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidDistribution(format!(
            "path-sum totals {sum}, expected 1 within 1e-10"
        )));
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    TabularJoint::new(v, gen_len, probs)
}

/// Calls `f` with every value tuple in the product of `supports`, together
/// with its probability weight.
fn for_each_tuple(supports: &[Vec<(TokenId, f64)>], f: &mut impl FnMut(&[TokenId], f64)) {
    fn rec(
        supports: &[Vec<(TokenId, f64)>],
        depth: usize,
        cur: &mut Vec<TokenId>,
        w: f64,
        f: &mut impl FnMut(&[TokenId], f64),
    ) {
        if depth == supports.len() {
            f(cur, w);
            return;
        }
        for &(value, p) in &supports[depth] {
            cur.push(value);
            rec(supports, depth + 1, cur, w * p, f);
            cur.pop();
        }
    }
    let mut cur = Vec::with_capacity(supports.len());
    rec(supports, 0, &mut cur, 1.0, f);
}

/// Calls `f` with every size-`k` index subset of `0..m`, ascending.
fn for_each_subset(m: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == 0 {
        f(&[]);
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k - 1;
        while idx[i] == i + m - k {
            if i == 0 {
                return;
            }
            i -= 1;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(m: usize, k: usize) -> f64 {
    let mut out = 1.0;
    for i in 0..k {
        out *= (m - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Samples a corpus of sequences: `samples_per_prompt` draws for each
/// prompt, each on its own counter-derived RNG stream, so the corpus is
/// reproducible and insensitive to scheduling.
pub fn decode_corpus<M: PredictiveModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    total_len: usize,
    cfg: &DecodeConfig,
    samples_per_prompt: usize,
    retain_traces: bool,
) -> Result<Corpus> {
    let mut samples = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for (prompt_idx, prompt) in prompts.iter().enumerate() {
        for sample_idx in 0..samples_per_prompt {
            let stream = (prompt_idx * samples_per_prompt + sample_idx) as u64;
            let mut rng = stream_rng(cfg.seed, stream);
            let (seq, trace) = decode_sample(model, prompt, total_len, cfg, &mut rng)?;
            samples.push(CorpusSample {
                prompt: prompt.clone(),
                tokens: seq.tokens()[prompt.len()..].to_vec(),
                trace: retain_traces.then_some(trace),
            });
        }
    }
    Ok(Corpus::new(samples))
}
