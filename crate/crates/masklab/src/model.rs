//! The predictive interface `p(x^i | context)` and its Bayes-exact oracle
//! implementations derived from tabular data distributions.

use serde::{Deserialize, Serialize};

use crate::dist::{FactorizedDist, TabularJoint};
use crate::error::{Error, Result};
use crate::vocab::{state_count, MaskedSequence, TokenId, Vocabulary, DEFAULT_ENUMERATION_CAP};

/// Whether predictions at position `i` may depend on the whole input or only
/// on positions strictly before `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScope {
    Unidirectional,
    Bidirectional,
}

/// A model producing a distribution over the vocabulary for masked positions
/// of a partially decoded sequence. Predictions are pure functions of the
/// input; valid implementations return vectors that sum to 1 within 1e-9.
pub trait PredictiveModel {
    fn context_scope(&self) -> ContextScope;

    fn vocab(&self) -> &Vocabulary;

    /// The fixed sequence length the model operates on.
    fn seq_len(&self) -> usize;

    /// Predictive distribution over `[0, V)` for `position` of `masked`.
    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>>;

    /// Predictions at several positions. The default loops over
    /// [`predict_one`](Self::predict_one); implementations with a shared
    /// forward pass override it.
    fn predict(&self, masked: &MaskedSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        positions
            .iter()
            .map(|&i| self.predict_one(masked, i))
            .collect()
    }
}

impl<M: PredictiveModel + ?Sized> PredictiveModel for &M {
    fn context_scope(&self) -> ContextScope {
        (**self).context_scope()
    }
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        (**self).predict_one(masked, position)
    }
    fn predict(&self, masked: &MaskedSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        (**self).predict(masked, positions)
    }
}

impl<M: PredictiveModel + ?Sized> PredictiveModel for Box<M> {
    fn context_scope(&self) -> ContextScope {
        (**self).context_scope()
    }
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        (**self).predict_one(masked, position)
    }
    fn predict(&self, masked: &MaskedSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        (**self).predict(masked, positions)
    }
}

type PredictionCache = std::collections::HashMap<(Vec<TokenId>, usize), Vec<f64>>;

/// Caches predictions by `(context, position)`. Predictions are pure, so
/// memoization changes nothing observable; it makes repeated queries of the
/// enumeration-backed oracles affordable inside decoding loops.
pub struct MemoizedModel<M> {
    inner: M,
    cache: std::cell::RefCell<PredictionCache>,
}

impl<M: PredictiveModel> MemoizedModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            cache: std::cell::RefCell::new(PredictionCache::new()),
        }
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: PredictiveModel> PredictiveModel for MemoizedModel<M> {
    fn context_scope(&self) -> ContextScope {
        self.inner.context_scope()
    }

    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        let key = (masked.tokens().to_vec(), position);
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let computed = self.inner.predict_one(masked, position)?;
        self.cache.borrow_mut().insert(key, computed.clone());
        Ok(computed)
    }
}

fn check_len(masked: &MaskedSequence, expected: usize) -> Result<()> {
    if masked.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "input length {} does not match model length {expected}",
            masked.len()
        )));
    }
    Ok(())
}

/// The optimally trained DLM of the factorization setting: at any masked
/// position it predicts the data marginal `q^i`, regardless of context.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "OracleFactorizedRepr", into = "OracleFactorizedRepr")]
pub struct OracleFactorized {
    factors: FactorizedDist,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct OracleFactorizedRepr {
    factors: FactorizedDist,
}

impl From<OracleFactorizedRepr> for OracleFactorized {
    fn from(repr: OracleFactorizedRepr) -> Self {
        OracleFactorized::new(repr.factors)
    }
}

impl From<OracleFactorized> for OracleFactorizedRepr {
    fn from(m: OracleFactorized) -> Self {
        Self { factors: m.factors }
    }
}

impl OracleFactorized {
    pub fn new(factors: FactorizedDist) -> Self {
        let vocab = Vocabulary::new(factors.vocab_size() as u32).expect("nonempty marginals");
        Self { factors, vocab }
    }

    pub fn factors(&self) -> &FactorizedDist {
        &self.factors
    }
}

impl PredictiveModel for OracleFactorized {
    fn context_scope(&self) -> ContextScope {
        ContextScope::Bidirectional
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.factors.len()
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        check_len(masked, self.seq_len())?;
        Ok(self.factors.marginal(position).to_vec())
    }
}

/// Bayes-optimal reconstruction oracle: the exact conditional of `X^i` given
/// the unmasked coordinates, marginalizing every other masked coordinate of
/// the joint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "JointRepr", into = "JointRepr")]
pub struct OraclePosterior {
    joint: TabularJoint,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct JointRepr {
    joint: TabularJoint,
}

impl From<JointRepr> for OraclePosterior {
    fn from(repr: JointRepr) -> Self {
        OraclePosterior::new(repr.joint)
    }
}

impl From<OraclePosterior> for JointRepr {
    fn from(m: OraclePosterior) -> Self {
        Self { joint: m.joint }
    }
}

impl OraclePosterior {
    pub fn new(joint: TabularJoint) -> Self {
        let vocab = Vocabulary::new(joint.vocab_size() as u32).expect("nonempty joint");
        Self { joint, vocab }
    }

    pub fn joint(&self) -> &TabularJoint {
        &self.joint
    }
}

impl PredictiveModel for OraclePosterior {
    fn context_scope(&self) -> ContextScope {
        ContextScope::Bidirectional
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.joint.len()
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        check_len(masked, self.seq_len())?;
        if !masked.is_masked(position) {
            return Err(Error::InvalidSequence(format!(
                "position {position} is not masked"
            )));
        }
        let v = self.joint.vocab_size();
        let others: Vec<usize> = masked
            .masked_positions()
            .into_iter()
            .filter(|&j| j != position)
            .collect();
        state_count(v, others.len() + 1, DEFAULT_ENUMERATION_CAP)?;

        let mut numerator = vec![0.0; v];
        let mut tokens = masked.tokens().to_vec();
        let mut assignment = vec![0usize; others.len()];
        loop {
            for (slot, &j) in others.iter().enumerate() {
                tokens[j] = assignment[slot] as TokenId;
            }
            for (value, slot) in numerator.iter_mut().enumerate() {
                tokens[position] = value as TokenId;
                *slot += self.joint.prob(&tokens);
            }
            // Odometer over the remaining masked coordinates.
            let mut slot = others.len();
            loop {
                if slot == 0 {
                    break;
                }
                slot -= 1;
                assignment[slot] += 1;
                if assignment[slot] < v {
                    break;
                }
                assignment[slot] = 0;
            }
            if others.is_empty() || (slot == 0 && assignment[0] == 0) {
                break;
            }
        }

        normalize_conditional(numerator, position)
    }
}

/// Exact next-token oracle `p(X^i | X^{<i})`. The query must carry a fully
/// unmasked prefix; anything at or after `position` is ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "JointRepr", into = "JointRepr")]
pub struct OracleCausal {
    joint: TabularJoint,
    vocab: Vocabulary,
}

impl From<JointRepr> for OracleCausal {
    fn from(repr: JointRepr) -> Self {
        OracleCausal::new(repr.joint)
    }
}

impl From<OracleCausal> for JointRepr {
    fn from(m: OracleCausal) -> Self {
        Self { joint: m.joint }
    }
}

impl OracleCausal {
    pub fn new(joint: TabularJoint) -> Self {
        let vocab = Vocabulary::new(joint.vocab_size() as u32).expect("nonempty joint");
        Self { joint, vocab }
    }

    pub fn joint(&self) -> &TabularJoint {
        &self.joint
    }

    /// Next-token conditional from a raw prefix of token ids.
    pub fn next_token(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let position = prefix.len();
        if position >= self.joint.len() {
            return Err(Error::ShapeMismatch(format!(
                "prefix of length {position} leaves no position to predict"
            )));
        }
        let v = self.joint.vocab_size();
        let mut numerator = vec![0.0; v];
        for (tokens, p) in self.joint.iter() {
            if tokens[..position] == *prefix {
                numerator[tokens[position] as usize] += p;
            }
        }
        normalize_conditional(numerator, position)
    }
}

impl PredictiveModel for OracleCausal {
    fn context_scope(&self) -> ContextScope {
        ContextScope::Unidirectional
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.joint.len()
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        check_len(masked, self.seq_len())?;
        if (0..position).any(|j| masked.is_masked(j)) {
            return Err(Error::InvalidSequence(format!(
                "causal prediction at {position} requires an unmasked prefix"
            )));
        }
        self.next_token(&masked.tokens()[..position])
    }
}

fn normalize_conditional(numerator: Vec<f64>, position: usize) -> Result<Vec<f64>> {
    let total: f64 = numerator.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext { position });
    }
    Ok(numerator.into_iter().map(|x| x / total).collect())
}
