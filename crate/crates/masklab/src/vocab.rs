//! Token alphabets, clean and partially masked sequences, and the
//! Bernoulli masking (noising) process.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::root_rng;

pub type TokenId = u32;

/// Default cap on enumerated state counts (`V^L` and branch totals).
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// A token alphabet of `size` real tokens `0..size`, plus a reserved MASK
/// sentinel outside the alphabet. MASK is never a member of the vocabulary,
/// so models cannot emit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    separator_id: Option<TokenId>,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidVocabulary("size must be at least 1".into()));
        }
        Ok(Self {
            size,
            separator_id: None,
        })
    }

    /// Vocabulary with a designated sentence-boundary token.
    pub fn with_separator(size: u32, separator_id: TokenId) -> Result<Self> {
        let mut v = Self::new(size)?;
        if separator_id >= size {
            return Err(Error::InvalidVocabulary(format!(
                "separator {separator_id} outside [0, {size})"
            )));
        }
        v.separator_id = Some(separator_id);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    /// The MASK sentinel: the first id outside `[0, V)`.
    pub fn mask_id(&self) -> TokenId {
        self.size
    }

    pub fn separator_id(&self) -> Option<TokenId> {
        self.separator_id
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }
}

/// A fully decoded sequence: every position holds a vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence {
    tokens: Vec<TokenId>,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSequence("length must be at least 1".into()));
        }
        for (position, &token) in tokens.iter().enumerate() {
            if !vocab.contains(token) {
                return Err(Error::InvalidToken {
                    token,
                    position,
                    vocab_size: vocab.size,
                });
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A partially decoded sequence: positions hold either a vocabulary token
/// or the MASK sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskedSequence {
    tokens: Vec<TokenId>,
    mask_id: TokenId,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSequence("length must be at least 1".into()));
        }
        let mask_id = vocab.mask_id();
        for (position, &token) in tokens.iter().enumerate() {
            if token != mask_id && !vocab.contains(token) {
                return Err(Error::InvalidToken {
                    token,
                    position,
                    vocab_size: vocab.size,
                });
            }
        }
        Ok(Self { tokens, mask_id })
    }

    /// Fully masked sequence of length `len`.
    pub fn fully_masked(len: usize, vocab: &Vocabulary) -> Result<Self> {
        Self::new(vec![vocab.mask_id(); len], vocab)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens[position] == self.mask_id
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn is_fully_unmasked(&self) -> bool {
        self.tokens.iter().all(|&t| t != self.mask_id)
    }

    /// Writes `token` at `position`, consuming and returning the sequence.
    pub fn with_token(mut self, position: usize, token: TokenId) -> Self {
        self.tokens[position] = token;
        self
    }

    pub fn set_token(&mut self, position: usize, token: TokenId) {
        self.tokens[position] = token;
    }

    /// Converts to a [`Sequence`]; fails if any position is still masked.
    pub fn into_sequence(self, vocab: &Vocabulary) -> Result<Sequence> {
        if !self.is_fully_unmasked() {
            return Err(Error::InvalidSequence(
                "sequence still contains masked positions".into(),
            ));
        }
        Sequence::new(self.tokens, vocab)
    }
}

/// A noise level `t` in `(0, 1]`: the per-position masking probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidNoiseLevel(t));
        }
        Ok(Self(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Noises `x0` by independently replacing each token with MASK with
/// probability `t`. Deterministic given the RNG state.
pub fn noise<R: Rng>(
    x0: &Sequence,
    t: NoiseLevel,
    vocab: &Vocabulary,
    rng: &mut R,
) -> MaskedSequence {
    let mask_id = vocab.mask_id();
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| {
            let u: f64 = rng.random();
            if u < t.value() {
                mask_id
            } else {
                tok
            }
        })
        .collect();
    MaskedSequence { tokens, mask_id }
}

/// Convenience wrapper seeding a fresh stream for one noising draw.
pub fn noise_seeded(x0: &Sequence, t: NoiseLevel, vocab: &Vocabulary, seed: u64) -> MaskedSequence {
    noise(x0, t, vocab, &mut root_rng(seed))
}

/// Number of sequences `V^L`, checked against `cap`.
pub fn state_count(vocab_size: usize, len: usize, cap: u64) -> Result<u64> {
    let mut n: u128 = 1;
    for _ in 0..len {
        n = n.saturating_mul(vocab_size as u128);
        if n > cap as u128 {
            return Err(Error::EnumerationCapExceeded { states: n, cap });
        }
    }
    Ok(n as u64)
}

/// Streams all token vectors of length `len` over `[0, vocab_size)` in
/// lexicographic order (first position most significant).
pub fn enumerate_sequences(
    vocab_size: usize,
    len: usize,
    cap: u64,
) -> Result<impl Iterator<Item = Vec<TokenId>>> {
    let total = state_count(vocab_size, len, cap)?;
    let v = vocab_size as u64;
    Ok((0..total).map(move |mut idx| {
        let mut tokens = vec![0 as TokenId; len];
        for i in (0..len).rev() {
            tokens[i] = (idx % v) as TokenId;
            idx /= v;
        }
        tokens
    }))
}
