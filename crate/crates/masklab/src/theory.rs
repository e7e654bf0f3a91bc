//! Mechanical verification of the entropy-reduction analysis: majorization
//! checks, the closed-form conditionals of the proof's two cases, the
//! theorem sweep over exact generation distributions, and the entropy
//! inequality chain `H(p_con) <= H(p_con, p_seq) <= H(p_seq) - delta`.
//!
//! Everything here runs on enumerable desk instances where both sides of
//! each inequality are computed exactly; Monte-Carlo variants exist for
//! instances past the enumeration cap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoding::{
    exact_generation_distribution, select_deterministic, DecodeConfig, StrategyKind,
};
use crate::dist::{entropy, FactorizedDist, TabularJoint};
use crate::error::{Error, Result};
use crate::metrics::{ar_entropy_mc, cross_entropy, exact_cross_entropy};
use crate::model::{OracleFactorized, PredictiveModel};
use crate::vocab::TokenId;

const GAP_TOL: f64 = 1e-12;

/// Result of a prefix-sum majorization check of `p` against the reference
/// `q`: classes are ordered by descending `q` (ties by class index), and
/// `gaps[k]` is `sum_{c<=k} p - sum_{c<=k} q`. `p` majorizes `q` when every
/// gap is nonnegative (within 1e-12), in which case Schur concavity forces
/// `H(p) <= H(q)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MajorizationCheck {
    pub gaps: Vec<f64>,
    pub pass: bool,
    pub entropy_p: f64,
    pub entropy_q: f64,
}

impl MajorizationCheck {
    /// The Schur-concavity consequence: on pass, entropy must not grow.
    pub fn entropy_consistent(&self) -> bool {
        !self.pass || self.entropy_p <= self.entropy_q + GAP_TOL
    }
}

pub fn check_majorization(p: &[f64], q: &[f64]) -> Result<MajorizationCheck> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "majorization check over {} vs {} classes",
            p.len(),
            q.len()
        )));
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).expect("finite").then(a.cmp(&b)));
    let mut gaps = Vec::with_capacity(q.len());
    let mut p_prefix = 0.0;
    let mut q_prefix = 0.0;
    for &c in &order {
        p_prefix += p[c];
        q_prefix += q[c];
        gaps.push(p_prefix - q_prefix);
    }
    let pass = gaps.iter().all(|&g| g >= -GAP_TOL);
    Ok(MajorizationCheck {
        gaps,
        pass,
        entropy_p: entropy(p),
        entropy_q: entropy(q),
    })
}

/// Case-1 conditional of the proof (a step decoding exactly one position):
/// the probability that position `i` decodes to class `c`, given that every
/// other not-yet-decoded position `j` in its block was remasked, is
/// proportional to `q_c^i * w_c` with
/// `w_c = prod_{j in T \ {i}} sum_{r: q_r^j <= min(tau, q_c^i)} q_r^j`.
///
/// Exact confidence ties follow the position-index oracle order (the lower
/// index wins), so at equality `q_r^j = q_c^i` the competitor only counts
/// as remasked when `j > i`.
pub fn case1_conditional(
    q: &FactorizedDist,
    i: usize,
    t_set: &[usize],
    tau: f64,
) -> Result<Vec<f64>> {
    if !t_set.contains(&i) {
        return Err(Error::ShapeMismatch(format!(
            "position {i} must be a member of the undecoded set"
        )));
    }
    let v = q.vocab_size();
    let mut unnormalized = vec![0.0; v];
    for (c, out) in unnormalized.iter_mut().enumerate() {
        let qci = q.marginal(i)[c];
        let mut w = qci;
        for &j in t_set {
            if j == i {
                continue;
            }
            let mut remask_mass = 0.0;
            for r in 0..v {
                let qrj = q.marginal(j)[r];
                let loses_tie_break = qrj < qci || (qrj == qci && i < j);
                if qrj <= tau && loses_tie_break {
                    remask_mass += qrj;
                }
            }
            w *= remask_mass;
        }
        *out = w;
    }
    let total: f64 = unnormalized.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext { position: i });
    }
    Ok(unnormalized.into_iter().map(|x| x / total).collect())
}

/// Case-2 conditional of the proof (a step decoding several positions at
/// once): the normalized truncation of `q^i` to classes with confidence
/// strictly above the threshold.
pub fn case2_conditional(q: &FactorizedDist, i: usize, tau: f64) -> Result<Vec<f64>> {
    let truncated: Vec<f64> = q
        .marginal(i)
        .iter()
        .map(|&x| if x > tau { x } else { 0.0 })
        .collect();
    let total: f64 = truncated.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext { position: i });
    }
    Ok(truncated.into_iter().map(|x| x / total).collect())
}

/// Exhaustive table of decode paths for a confidence strategy over the
/// factorized oracle: every `(decode-step assignment, final tokens)` pair
/// with its exact probability. This is the enumeration side of the proof
/// equivalence: conditionals read from this table must match the
/// closed-form case-1/case-2 formulas.
#[derive(Debug, Clone)]
pub struct TracePathTable {
    vocab_size: usize,
    entries: BTreeMap<(Vec<usize>, Vec<TokenId>), f64>,
}

impl TracePathTable {
    pub fn entries(&self) -> &BTreeMap<(Vec<usize>, Vec<TokenId>), f64> {
        &self.entries
    }

    /// Conditional distribution of `X^i` given the full step assignment and
    /// every other token (`others[i]` itself is ignored), or `None` when
    /// the conditioning event has zero probability.
    pub fn conditional(&self, i: usize, steps: &[usize], others: &[TokenId]) -> Option<Vec<f64>> {
        let mut numerator = vec![0.0; self.vocab_size];
        let mut total = 0.0;
        for ((z, tokens), &p) in &self.entries {
            if z != steps {
                continue;
            }
            let matches = tokens
                .iter()
                .enumerate()
                .all(|(j, &t)| j == i || t == others[j]);
            if matches {
                numerator[tokens[i] as usize] += p;
                total += p;
            }
        }
        if total <= 0.0 {
            return None;
        }
        Some(numerator.into_iter().map(|x| x / total).collect())
    }
}

/// Enumerates every decode path of a confidence strategy (no bias
/// elimination) over `OracleFactorized(q)` from the empty prompt, tracking
/// the step at which each position decodes.
pub fn enumerate_trace_paths(
    factors: &FactorizedDist,
    cfg: &DecodeConfig,
    cap: u64,
) -> Result<TracePathTable> {
    cfg.validate()?;
    if !matches!(
        cfg.strategy,
        StrategyKind::Sequential | StrategyKind::LowConfidence | StrategyKind::DynamicLowConfidence
    ) || cfg.bias_elimination
    {
        return Err(Error::InvalidDecodeConfig(
            "trace enumeration covers plain confidence strategies".into(),
        ));
    }
    let l = factors.len();
    if !l.is_multiple_of(cfg.block_length) {
        return Err(Error::InvalidDecodeConfig(format!(
            "length {l} not divisible by block length {}",
            cfg.block_length
        )));
    }
    let v = factors.vocab_size();
    let mask = v as TokenId;
    let mut entries = BTreeMap::new();
    let mut budget = cap as i128;
    let mut tokens = vec![mask; l];
    let mut steps = vec![0usize; l];
    descend(
        factors,
        cfg,
        &mut tokens,
        &mut steps,
        1,
        1.0,
        &mut entries,
        &mut budget,
    )?;
    return Ok(TracePathTable {
        vocab_size: v,
        entries,
    });

    #[allow(clippy::too_many_arguments)]
    fn descend(
        factors: &FactorizedDist,
        cfg: &DecodeConfig,
        tokens: &mut Vec<TokenId>,
        steps: &mut Vec<usize>,
        step: usize,
        mass: f64,
        entries: &mut BTreeMap<(Vec<usize>, Vec<TokenId>), f64>,
        budget: &mut i128,
    ) -> Result<()> {
        let v = factors.vocab_size();
        let mask = v as TokenId;
        let l = tokens.len();
        let masked: Vec<usize> = match (0..l / cfg.block_length)
            .map(|b| {
                let start = b * cfg.block_length;
                (start..start + cfg.block_length)
                    .filter(|&i| tokens[i] == mask)
                    .collect::<Vec<_>>()
            })
            .find(|m| !m.is_empty())
        {
            Some(m) => m,
            None => {
                *entries.entry((steps.clone(), tokens.clone())).or_insert(0.0) += mass;
                return Ok(());
            }
        };
        let keep_target = cfg.keep_per_step().min(masked.len());
        let dists: Vec<&[f64]> = masked.iter().map(|&i| factors.marginal(i)).collect();
        let entropy_scores = vec![0.0; masked.len()];
        let mut proposal = vec![0 as TokenId; masked.len()];
        enumerate(
            factors,
            cfg,
            tokens,
            steps,
            step,
            mass,
            &masked,
            &dists,
            &entropy_scores,
            keep_target,
            &mut proposal,
            0,
            entries,
            budget,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate(
        factors: &FactorizedDist,
        cfg: &DecodeConfig,
        tokens: &mut Vec<TokenId>,
        steps: &mut Vec<usize>,
        step: usize,
        mass: f64,
        masked: &[usize],
        dists: &[&[f64]],
        entropy_scores: &[f64],
        keep_target: usize,
        proposal: &mut Vec<TokenId>,
        depth: usize,
        entries: &mut BTreeMap<(Vec<usize>, Vec<TokenId>), f64>,
        budget: &mut i128,
    ) -> Result<()> {
        if depth == masked.len() {
            *budget -= 1;
            if *budget < 0 {
                return Err(Error::BranchCapExceeded {
                    block: masked[0] / cfg.block_length,
                    step,
                    branches: 0,
                    cap: 0,
                });
            }
            let confidence: Vec<f64> = proposal
                .iter()
                .zip(dists)
                .map(|(&t, d)| d[t as usize])
                .collect();
            let kept =
                select_deterministic(cfg, masked, &confidence, entropy_scores, keep_target);
            for &pos in &kept {
                let slot = masked.binary_search(&pos).expect("kept is masked");
                tokens[pos] = proposal[slot];
                steps[pos] = step;
            }
            descend(factors, cfg, tokens, steps, step + 1, mass, entries, budget)?;
            for &pos in &kept {
                tokens[pos] = factors.vocab_size() as TokenId;
                steps[pos] = 0;
            }
            return Ok(());
        }
        for value in 0..factors.vocab_size() {
            let p = dists[depth][value];
            if p <= 0.0 {
                continue;
            }
            proposal[depth] = value as TokenId;
            enumerate(
                factors,
                cfg,
                tokens,
                steps,
                step,
                mass * p,
                masked,
                dists,
                entropy_scores,
                keep_target,
                proposal,
                depth + 1,
                entries,
                budget,
            )?;
        }
        Ok(())
    }
}

/// One instance of the theorem sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremInstance {
    #[serde(rename = "q")]
    pub marginals: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub block_length: usize,
    pub tau: f64,
    #[serde(rename = "H_data")]
    pub h_data: f64,
    #[serde(rename = "H_lcr")]
    pub h_lcr: f64,
    #[serde(rename = "H_dlcr")]
    pub h_dlcr: f64,
    pub majorization_pass: bool,
    pub pass: bool,
}

/// Outcome of a theorem sweep: entropy inequalities and per-prefix
/// conditional majorization for every instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub instances: Vec<TheoremInstance>,
    pub violations: usize,
}

const ENTROPY_SLACK: f64 = 1e-9;

/// Verifies `H(p_lcr) <= H(p_data)` and `H(p_dlcr) <= H(p_data)` for every
/// `(B, tau)` grid point by exact enumeration over the factorized oracle,
/// together with the per-position conditional majorization that drives the
/// proof. `invert_confidence` deliberately corrupts the selection rule so
/// sweeps can demonstrate they would catch a broken decoder.
pub fn verify_entropy_reduction(
    factors: &FactorizedDist,
    grid: &[(usize, f64)],
    cap: u64,
    invert_confidence: bool,
) -> Result<TheoremReport> {
    let model = OracleFactorized::new(factors.clone());
    let l = factors.len();
    let h_data = factors.entropy();
    let mut instances = Vec::new();
    let mut violations = 0usize;
    for &(block_length, tau) in grid {
        if !l.is_multiple_of(block_length) {
            return Err(Error::InvalidDecodeConfig(format!(
                "block length {block_length} does not divide {l}"
            )));
        }
        let mut lcr_cfg = DecodeConfig::new(StrategyKind::LowConfidence, block_length);
        lcr_cfg.invert_confidence = invert_confidence;
        let mut dlcr_cfg =
            DecodeConfig::new(StrategyKind::DynamicLowConfidence, block_length).with_tau(tau);
        dlcr_cfg.invert_confidence = invert_confidence;

        let p_lcr = exact_generation_distribution(&model, &[], l, &lcr_cfg, cap)?;
        let p_dlcr = exact_generation_distribution(&model, &[], l, &dlcr_cfg, cap)?;
        let h_lcr = p_lcr.entropy(false);
        let h_dlcr = p_dlcr.entropy(false);

        let majorization_pass = conditional_majorization_holds(&p_lcr, factors)?
            && conditional_majorization_holds(&p_dlcr, factors)?;
        let pass = h_lcr <= h_data + ENTROPY_SLACK
            && h_dlcr <= h_data + ENTROPY_SLACK
            && majorization_pass;
        if !pass {
            violations += 1;
        }
        instances.push(TheoremInstance {
            marginals: factors.marginals().to_vec(),
            block_length,
            tau,
            h_data,
            h_lcr,
            h_dlcr,
            majorization_pass,
            pass,
        });
    }
    Ok(TheoremReport {
        instances,
        violations,
    })
}

/// Checks that for every position and every positive-probability prefix,
/// the generated conditional majorizes the data marginal `q^i`.
fn conditional_majorization_holds(
    generated: &TabularJoint,
    factors: &FactorizedDist,
) -> Result<bool> {
    let l = generated.len();
    let v = generated.vocab_size();
    for i in 0..l {
        // Conditionals of X^i given each prefix x^{<i}.
        let mut table: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
        for (tokens, p) in generated.iter() {
            if p <= 0.0 {
                continue;
            }
            let prefix = tokens[..i].to_vec();
            table.entry(prefix).or_insert_with(|| vec![0.0; v])[tokens[i] as usize] += p;
        }
        for (_, mut conditional) in table {
            let total: f64 = conditional.iter().sum();
            if total <= 0.0 {
                continue;
            }
            conditional.iter_mut().for_each(|x| *x /= total);
            let check = check_majorization(&conditional, factors.marginal(i))?;
            if !check.pass || !check.entropy_consistent() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// One row of the inequality-chain evaluation for a decoding strategy:
/// the strategy's own entropy (exact path only), the cross-entropy against
/// sequential decoding, the sequential entropy, and
/// `delta = H(p_seq) - H(p_con, p_seq)`. Inequality (ii) of the chain holds
/// when `delta` is positive beyond tolerance (exact) or beyond three
/// combined standard errors (Monte Carlo).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InequalityChainReport {
    pub strategy: String,
    pub exact: bool,
    #[serde(rename = "H_con")]
    pub h_con: Option<f64>,
    #[serde(rename = "H_cross")]
    pub h_cross: f64,
    pub h_cross_stderr: Option<f64>,
    #[serde(rename = "H_seq")]
    pub h_seq: f64,
    pub h_seq_stderr: Option<f64>,
    pub delta: f64,
    pub inequality_ii_holds: bool,
}

fn strategy_label(cfg: &DecodeConfig) -> String {
    let mut label = cfg.strategy.name().to_string();
    if cfg.bias_elimination {
        label.push_str("+bias_elim");
    }
    label
}

const DELTA_TOL: f64 = 1e-10;

/// Exact inequality chain on an enumerable instance: all three entropies
/// per token, by enumeration. Gibbs' inequality `H_con <= H_cross` is a
/// structural consequence and is asserted.
pub fn inequality_chain_exact<M: PredictiveModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    total_len: usize,
    configs: &[DecodeConfig],
    cap: u64,
) -> Result<Vec<InequalityChainReport>> {
    let p_seq =
        exact_generation_distribution(model, prompt, total_len, &DecodeConfig::sequential(), cap)?;
    let h_seq = p_seq.entropy(true);
    let mut reports = Vec::new();
    for cfg in configs {
        let p_con = exact_generation_distribution(model, prompt, total_len, cfg, cap)?;
        let h_con = p_con.entropy(true);
        let h_cross = exact_cross_entropy(&p_con, &p_seq)?;
        debug_assert!(h_con <= h_cross + 1e-12, "Gibbs violated: {h_con} > {h_cross}");
        let delta = h_seq - h_cross;
        reports.push(InequalityChainReport {
            strategy: strategy_label(cfg),
            exact: true,
            h_con: Some(h_con),
            h_cross,
            h_cross_stderr: None,
            h_seq,
            h_seq_stderr: None,
            delta,
            inequality_ii_holds: delta > DELTA_TOL,
        });
    }
    Ok(reports)
}

/// Monte-Carlo inequality chain for instances past the enumeration cap:
/// `H(p_con)` is not directly computable, so the report carries only its
/// Gibbs upper bound (the cross-entropy column).
pub fn inequality_chain_mc<M: PredictiveModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    configs: &[DecodeConfig],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<Vec<InequalityChainReport>> {
    let total_len = model.seq_len();
    let n_total = prompts.len().max(1) * samples_per_prompt;
    // Distinct stream family for the sequential-entropy estimate.
    let h_seq = ar_entropy_mc(model, prompts, n_total, seed ^ 0x9e37_79b9)?;
    let empty_prompt: Vec<Vec<TokenId>> = vec![Vec::new()];
    let effective_prompts = if prompts.is_empty() {
        &empty_prompt[..]
    } else {
        prompts
    };
    let mut reports = Vec::new();
    for cfg in configs {
        let mut corpus_cfg = cfg.clone();
        corpus_cfg.seed = seed;
        let corpus = crate::decoding::decode_corpus(
            model,
            effective_prompts,
            total_len,
            &corpus_cfg,
            samples_per_prompt,
            false,
        )?;
        let ce = cross_entropy(&corpus, model)?;
        let delta = h_seq.mean - ce.mean;
        let sigma = (h_seq.stderr.powi(2) + ce.stderr.powi(2)).sqrt();
        reports.push(InequalityChainReport {
            strategy: strategy_label(cfg),
            exact: false,
            h_con: None,
            h_cross: ce.mean,
            h_cross_stderr: Some(ce.stderr),
            h_seq: h_seq.mean,
            h_seq_stderr: Some(h_seq.stderr),
            delta,
            inequality_ii_holds: delta > 3.0 * sigma,
        });
    }
    Ok(reports)
}

/// Gibbs' inequality on explicit tables: `H(p) <= H(p, q)` with equality
/// iff `p = q`. Returns `(H(p), H(p, q))` per token.
pub fn gibbs_pair(p: &TabularJoint, q: &TabularJoint) -> Result<(f64, f64)> {
    Ok((p.entropy(true), exact_cross_entropy(p, q)?))
}
