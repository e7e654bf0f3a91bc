//! Exact tabular distributions over `V^L` and entropy utilities.
//!
//! All entropies are in nats, with the convention `0 * ln 0 = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{enumerate_sequences, state_count, Sequence, TokenId, DEFAULT_ENUMERATION_CAP};

const SUM_TOL: f64 = 1e-12;

/// Shannon entropy `-sum p ln p` of a nonnegative vector (nats).
pub fn entropy(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

fn validate_distribution(probs: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "{what}: entry {p} is negative or non-finite"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what}: sums to {sum}, expected 1 within {SUM_TOL}"
        )));
    }
    Ok(())
}

/// A product distribution over `V^L`: independent per-position marginals
/// `q^1 .. q^L`, each a probability vector of length `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorizedDistRepr", into = "FactorizedDistRepr")]
pub struct FactorizedDist {
    marginals: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FactorizedDistRepr {
    marginals: Vec<Vec<f64>>,
}

impl TryFrom<FactorizedDistRepr> for FactorizedDist {
    type Error = Error;
    fn try_from(repr: FactorizedDistRepr) -> Result<Self> {
        FactorizedDist::new(repr.marginals)
    }
}

impl From<FactorizedDist> for FactorizedDistRepr {
    fn from(f: FactorizedDist) -> Self {
        Self {
            marginals: f.marginals,
        }
    }
}

impl FactorizedDist {
    pub fn new(marginals: Vec<Vec<f64>>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidDistribution(
                "factorized distribution needs at least one position".into(),
            ));
        }
        let v = marginals[0].len();
        for (i, q) in marginals.iter().enumerate() {
            if q.len() != v {
                return Err(Error::ShapeMismatch(format!(
                    "marginal {i} has {} classes, expected {v}",
                    q.len()
                )));
            }
            validate_distribution(q, &format!("marginal {i}"))?;
        }
        Ok(Self { marginals })
    }

    pub fn vocab_size(&self) -> usize {
        self.marginals[0].len()
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Marginal `q^i` (0-indexed position).
    pub fn marginal(&self, i: usize) -> &[f64] {
        &self.marginals[i]
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    pub fn prob(&self, tokens: &[TokenId]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.marginals[i][t as usize])
            .product()
    }

    /// Expands the product into a full table `probs[x] = prod_i q^i_{x^i}`.
    pub fn to_joint(&self, cap: u64) -> Result<TabularJoint> {
        let v = self.vocab_size();
        let l = self.len();
        let total = state_count(v, l, cap)?;
        let mut probs = Vec::with_capacity(total as usize);
        for tokens in enumerate_sequences(v, l, cap)? {
            probs.push(self.prob(&tokens));
        }
        TabularJoint::new(v, l, probs)
    }

    /// Entropy `sum_i H(q^i)` of the product distribution (nats).
    pub fn entropy(&self) -> f64 {
        self.marginals.iter().map(|q| entropy(q)).sum()
    }
}

/// An exact probability table over `V^L`, indexed lexicographically with the
/// first position most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularJointRepr", into = "TabularJointRepr")]
pub struct TabularJoint {
    vocab_size: usize,
    len: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TabularJointRepr {
    #[serde(rename = "V")]
    vocab_size: usize,
    #[serde(rename = "L")]
    len: usize,
    probs: Vec<f64>,
}

impl TryFrom<TabularJointRepr> for TabularJoint {
    type Error = Error;
    fn try_from(repr: TabularJointRepr) -> Result<Self> {
        TabularJoint::new(repr.vocab_size, repr.len, repr.probs)
    }
}

impl From<TabularJoint> for TabularJointRepr {
    fn from(j: TabularJoint) -> Self {
        Self {
            vocab_size: j.vocab_size,
            len: j.len,
            probs: j.probs,
        }
    }
}

impl TabularJoint {
    pub fn new(vocab_size: usize, len: usize, probs: Vec<f64>) -> Result<Self> {
        let total = state_count(vocab_size, len, DEFAULT_ENUMERATION_CAP)?;
        if probs.len() as u64 != total {
            return Err(Error::ShapeMismatch(format!(
                "joint table has {} entries, expected {total}",
                probs.len()
            )));
        }
        validate_distribution(&probs, "joint")?;
        Ok(Self {
            vocab_size,
            len,
            probs,
        })
    }

    /// Builds the table by evaluating `f` on every sequence, normalizing is
    /// the caller's job: `f` must already be a distribution.
    pub fn from_fn(
        vocab_size: usize,
        len: usize,
        cap: u64,
        mut f: impl FnMut(&[TokenId]) -> f64,
    ) -> Result<Self> {
        let total = state_count(vocab_size, len, cap)?;
        let mut probs = Vec::with_capacity(total as usize);
        for tokens in enumerate_sequences(vocab_size, len, cap)? {
            probs.push(f(&tokens));
        }
        Self::new(vocab_size, len, probs)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Lexicographic index of a token vector.
    pub fn index_of(&self, tokens: &[TokenId]) -> usize {
        debug_assert_eq!(tokens.len(), self.len);
        let mut idx = 0usize;
        for &t in tokens {
            idx = idx * self.vocab_size + t as usize;
        }
        idx
    }

    pub fn prob(&self, tokens: &[TokenId]) -> f64 {
        self.probs[self.index_of(tokens)]
    }

    pub fn prob_seq(&self, seq: &Sequence) -> f64 {
        self.prob(seq.tokens())
    }

    /// Iterates `(tokens, probability)` in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<TokenId>, f64)> + '_ {
        enumerate_sequences(self.vocab_size, self.len, u64::MAX)
            .expect("validated at construction")
            .zip(self.probs.iter().copied())
    }

    /// Joint entropy in nats; `per_token` divides by `L`, giving the
    /// average uncertainty per token.
    pub fn entropy(&self, per_token: bool) -> f64 {
        let h = entropy(&self.probs);
        if per_token {
            h / self.len as f64
        } else {
            h
        }
    }

    /// Per-position marginal obtained by summation.
    pub fn position_marginal(&self, position: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for (tokens, p) in self.iter() {
            out[tokens[position] as usize] += p;
        }
        out
    }

    /// Total variation distance to another table of identical shape.
    pub fn total_variation(&self, other: &TabularJoint) -> f64 {
        assert_eq!(self.probs.len(), other.probs.len());
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Entropy of a joint table (nats); module-level spelling of
/// [`TabularJoint::entropy`].
pub fn joint_entropy(joint: &TabularJoint, per_token: bool) -> f64 {
    joint.entropy(per_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_instance() -> FactorizedDist {
        FactorizedDist::new(vec![vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap()
    }

    #[test]
    fn uniform_product_is_uniform_joint() {
        let f = FactorizedDist::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let j = f.to_joint(100).unwrap();
        assert_eq!(j.probs(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn hand_instance_joint() {
        let j = hand_instance().to_joint(100).unwrap();
        let expect = [0.54, 0.36, 0.06, 0.04];
        for (a, b) in j.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_conventions() {
        // Point mass has zero entropy.
        let j = TabularJoint::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(j.entropy(false), 0.0);
        // Uniform over V^L has per-token entropy ln V.
        let v = 3;
        let l = 2;
        let n = v_pow(v, l);
        let j = TabularJoint::new(v, l, vec![1.0 / n as f64; n]).unwrap();
        assert!((j.entropy(true) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_direct_summation() {
        // Independent high-precision route: sort ascending before summing.
        let j = hand_instance().to_joint(100).unwrap();
        let mut terms: Vec<f64> = j
            .probs()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: f64 = terms.iter().sum();
        assert!((j.entropy(false) - oracle).abs() < 1e-14);
    }

    fn v_pow(v: usize, l: usize) -> usize {
        v.pow(l as u32)
    }

    #[test]
    fn marginalization_recovers_factors() {
        let f = FactorizedDist::new(vec![
            vec![0.2, 0.3, 0.5],
            vec![0.1, 0.1, 0.8],
            vec![0.4, 0.35, 0.25],
        ])
        .unwrap();
        let j = f.to_joint(1000).unwrap();
        for i in 0..3 {
            let m = j.position_marginal(i);
            for (a, b) in m.iter().zip(f.marginal(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn serialization_round_trips_bit_faithfully() {
        let f = FactorizedDist::new(vec![vec![0.123_456_789_012_345_68, 0.876_543_210_987_654_3]])
            .unwrap();
        let s = serde_json::to_string(&f).unwrap();
        let back: FactorizedDist = serde_json::from_str(&s).unwrap();
        for (a, b) in f.marginal(0).iter().zip(back.marginal(0)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let j = hand_instance().to_joint(100).unwrap();
        let s = serde_json::to_string(&j).unwrap();
        assert!(s.contains("\"V\":2") && s.contains("\"L\":2"));
        let back: TabularJoint = serde_json::from_str(&s).unwrap();
        for (a, b) in j.probs().iter().zip(back.probs()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(TabularJoint::new(2, 2, vec![0.5, 0.5, 0.0, 0.1]).is_err());
        assert!(TabularJoint::new(2, 2, vec![0.5, 0.5, 0.0]).is_err());
        assert!(FactorizedDist::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(FactorizedDist::new(vec![vec![1.1, -0.1]]).is_err());
    }

    fn robin_hood(q: &[f64], rng: &mut impl rand::Rng) -> Vec<f64> {
        use rand::RngExt;
        // Transfer mass from a richer class to a poorer one; the result is
        // majorized by q, so its entropy must not be smaller.
        let mut p = q.to_vec();
        let hi = (0..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
        let lo = (0..p.len()).min_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
        if hi == lo {
            return p;
        }
        let delta: f64 = rng.random::<f64>() * (p[hi] - p[lo]) / 2.0;
        p[hi] -= delta;
        p[lo] += delta;
        p
    }

    #[test]
    fn entropy_is_schur_concave_under_robin_hood_transfers() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            use rand::RngExt;
            let k = rng.random_range(2..6usize);
            let mut q: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= s);
            let p = robin_hood(&q, &mut rng);
            assert!(entropy(&q) <= entropy(&p) + 1e-12);
        }
    }

    fn factor_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..4).prop_flat_map(|v| {
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, v), 1..4)
        })
    }

    proptest! {
        #[test]
        fn factorized_joint_marginals_match(raw in factor_rows()) {
            let marginals: Vec<Vec<f64>> = raw
                .iter()
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    let mut q: Vec<f64> = row.iter().map(|x| x / s).collect();
                    let drift: f64 = 1.0 - q.iter().sum::<f64>();
                    q[0] += drift;
                    q
                })
                .collect();
            let f = FactorizedDist::new(marginals).unwrap();
            let j = f.to_joint(10_000).unwrap();
            for i in 0..f.len() {
                let m = j.position_marginal(i);
                for (a, b) in m.iter().zip(f.marginal(i)) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
            // Product entropy equals joint entropy for independent factors.
            prop_assert!((f.entropy() - j.entropy(false)).abs() <= 1e-10);
        }
    }
}
