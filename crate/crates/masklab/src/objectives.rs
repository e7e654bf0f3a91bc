//! The eight interpolated training objectives between autoregressive and
//! diffusion losses, their Monte-Carlo estimates, closed-form tabular
//! optima, and the next-token-prediction alignment loss.
//!
//! An objective is assembled from four components: context scope
//! (unidirectional `uc` / bidirectional `bc`), input masking `im`, label
//! masking `lm`, and the weighting function `wf` (`1/t`). Two rules cut the
//! sixteen combinations down to eight: bidirectional context requires both
//! maskings (otherwise the task degenerates to copying), and the weighting
//! function is only varied when label masking is present (it compensates
//! for the masked-position count scaling with `t`).
//!
//! The admissible codes, which are also the CLI vocabulary:
//! `uc`, `uc+im`, `uc+lm`, `uc+lm+wf`, `uc+im+lm`, `uc+im+lm+wf`,
//! `bc+im+lm`, `bc+im+lm+wf`.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::dist::TabularJoint;
use crate::error::{Error, Result};
use crate::model::{ContextScope, PredictiveModel};
use crate::stats::McEstimate;
use crate::vocab::{noise, MaskedSequence, NoiseLevel, Sequence, TokenId, Vocabulary};

/// Context scope component of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveContext {
    Unidirectional,
    Bidirectional,
}

/// Loss weighting across noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Constant,
    InverseT,
}

/// One admissible training objective. Construct via [`ObjectiveSpec::new`]
/// or [`ObjectiveSpec::parse`]; both enforce the admissibility rules, so
/// exactly eight values exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectiveSpec {
    context: ObjectiveContext,
    input_masking: bool,
    label_masking: bool,
    weighting: Weighting,
}

impl TryFrom<String> for ObjectiveSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ObjectiveSpec> for String {
    fn from(spec: ObjectiveSpec) -> String {
        spec.code()
    }
}

impl ObjectiveSpec {
    pub fn new(
        context: ObjectiveContext,
        input_masking: bool,
        label_masking: bool,
        weighting: Weighting,
    ) -> Result<Self> {
        if context == ObjectiveContext::Bidirectional && !(input_masking && label_masking) {
            return Err(Error::InadmissibleObjective(
                "bidirectional context requires input and label masking".into(),
            ));
        }
        if weighting == Weighting::InverseT && !label_masking {
            return Err(Error::InadmissibleObjective(
                "the 1/t weighting is only varied with label masking".into(),
            ));
        }
        Ok(Self {
            context,
            input_masking,
            label_masking,
            weighting,
        })
    }

    /// All eight admissible objectives, ARM first, DLM last.
    pub fn all() -> Vec<ObjectiveSpec> {
        ["uc", "uc+im", "uc+lm", "uc+lm+wf", "uc+im+lm", "uc+im+lm+wf", "bc+im+lm", "bc+im+lm+wf"]
            .iter()
            .map(|code| Self::parse(code).expect("static codes are admissible"))
            .collect()
    }

    pub fn parse(code: &str) -> Result<Self> {
        let mut parts = code.split('+');
        let context = match parts.next() {
            Some("uc") => ObjectiveContext::Unidirectional,
            Some("bc") => ObjectiveContext::Bidirectional,
            _ => return Err(Error::UnknownObjectiveCode(code.to_string())),
        };
        let (mut im, mut lm, mut wf) = (false, false, false);
        for part in parts {
            match part {
                "im" if !im => im = true,
                "lm" if !lm => lm = true,
                "wf" if !wf => wf = true,
                _ => return Err(Error::UnknownObjectiveCode(code.to_string())),
            }
        }
        Self::new(
            context,
            im,
            lm,
            if wf { Weighting::InverseT } else { Weighting::Constant },
        )
    }

    /// The canonical string code, e.g. `uc+im+lm+wf`.
    pub fn code(&self) -> String {
        let mut s = String::from(match self.context {
            ObjectiveContext::Unidirectional => "uc",
            ObjectiveContext::Bidirectional => "bc",
        });
        if self.input_masking {
            s.push_str("+im");
        }
        if self.label_masking {
            s.push_str("+lm");
        }
        if self.weighting == Weighting::InverseT {
            s.push_str("+wf");
        }
        s
    }

    pub fn context(&self) -> ObjectiveContext {
        self.context
    }

    pub fn input_masking(&self) -> bool {
        self.input_masking
    }

    pub fn label_masking(&self) -> bool {
        self.label_masking
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    /// Model scope this objective trains: bidirectional models pair with
    /// `bc`, unidirectional with `uc`.
    pub fn model_scope(&self) -> ContextScope {
        match self.context {
            ObjectiveContext::Unidirectional => ContextScope::Unidirectional,
            ObjectiveContext::Bidirectional => ContextScope::Bidirectional,
        }
    }

    /// Positions contributing loss terms for a given noised input.
    pub fn label_positions(&self, xt: &MaskedSequence) -> Vec<usize> {
        if self.label_masking {
            xt.masked_positions()
        } else {
            (0..xt.len()).collect()
        }
    }

    /// The loss weight `omega_t`.
    pub fn weight(&self, t: NoiseLevel) -> f64 {
        match self.weighting {
            Weighting::Constant => 1.0,
            Weighting::InverseT => 1.0 / t.value(),
        }
    }

    /// The model query context for predicting position `i`: the full noised
    /// sequence for `bc`, or the (noised or clean) prefix with everything
    /// from `i` on masked for `uc`.
    pub fn query_context(
        &self,
        x0: &Sequence,
        xt: &MaskedSequence,
        i: usize,
        vocab: &Vocabulary,
    ) -> Result<MaskedSequence> {
        match self.context {
            ObjectiveContext::Bidirectional => Ok(xt.clone()),
            ObjectiveContext::Unidirectional => {
                let mask = vocab.mask_id();
                let mut tokens: Vec<TokenId> = if self.input_masking {
                    xt.tokens()[..i].to_vec()
                } else {
                    x0.tokens()[..i].to_vec()
                };
                tokens.extend(std::iter::repeat_n(mask, xt.len() - i));
                MaskedSequence::new(tokens, vocab)
            }
        }
    }

    /// Table cell key (position, context encoding) for tabular models. The
    /// encoding is the part of the input visible to the model when it
    /// predicts `i` under this objective.
    fn cell_key_from_query(&self, query: &MaskedSequence, i: usize) -> (usize, Vec<TokenId>) {
        let ctx = match self.context {
            ObjectiveContext::Bidirectional => query.tokens().to_vec(),
            ObjectiveContext::Unidirectional => query.tokens()[..i].to_vec(),
        };
        (i, ctx)
    }
}

/// The truncated noise-level sampler `t ~ Uniform(t_min, 1)`. The
/// truncation keeps the `1/t` weighting's variance finite; its density
/// constant is common to all draws and cancels in normalized quantities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TSampler {
    pub t_min: f64,
}

impl TSampler {
    pub const DEFAULT_T_MIN: f64 = 0.01;

    pub fn new(t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::InvalidNoiseLevel(t_min));
        }
        Ok(Self { t_min })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> NoiseLevel {
        let u: f64 = rng.random();
        NoiseLevel::new(self.t_min + (1.0 - self.t_min) * u).expect("in (0, 1)")
    }
}

impl Default for TSampler {
    fn default() -> Self {
        Self {
            t_min: Self::DEFAULT_T_MIN,
        }
    }
}

fn check_noising(x0: &Sequence, xt: &MaskedSequence) -> Result<()> {
    if x0.len() != xt.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 length {} vs x_t length {}",
            x0.len(),
            xt.len()
        )));
    }
    for i in 0..x0.len() {
        if !xt.is_masked(i) && xt.tokens()[i] != x0.tokens()[i] {
            return Err(Error::InvalidSequence(format!(
                "x_t position {i} holds a token that differs from x0"
            )));
        }
    }
    Ok(())
}

/// Per-sample objective loss,
/// `omega_t * sum_{i in labels} -log p(x0^i | context_i)` in nats: the
/// label set is the masked positions under label masking (else all
/// positions), the context is the full noised input for `bc` or the prefix
/// for `uc`, and `omega_t = 1/t` under the inverse-t weighting.
pub fn loss<M: PredictiveModel + ?Sized>(
    model: &M,
    x0: &Sequence,
    t: NoiseLevel,
    xt: &MaskedSequence,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    check_noising(x0, xt)?;
    if spec.context() == ObjectiveContext::Bidirectional
        && model.context_scope() == ContextScope::Unidirectional
    {
        return Err(Error::ScopeMismatch {
            model: "unidirectional".into(),
            objective: spec.code(),
        });
    }
    let vocab = model.vocab().clone();
    let mut total = 0.0;
    for i in spec.label_positions(xt) {
        let query = spec.query_context(x0, xt, i, &vocab)?;
        let p = model.predict_one(&query, i)?;
        let term = -p[x0.tokens()[i] as usize].ln();
        if !term.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        total += term;
    }
    Ok(spec.weight(t) * total)
}

/// Monte-Carlo estimate of the expected objective loss under
/// `x0 ~ joint, t ~ sampler, x_t ~ noise(x0, t)`. Seeded and reproducible.
pub fn expected_loss<M: PredictiveModel + ?Sized, R: Rng>(
    model: &M,
    joint: &TabularJoint,
    spec: &ObjectiveSpec,
    t_sampler: &TSampler,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::EmptySample);
    }
    let vocab = model.vocab().clone();
    let sequences: Vec<Vec<TokenId>> = joint.iter().map(|(tokens, _)| tokens).collect();
    let mut cumulative = Vec::with_capacity(sequences.len());
    let mut acc = 0.0;
    for &p in joint.probs() {
        acc += p;
        cumulative.push(acc);
    }
    let mut samples = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let u: f64 = rng.random();
        let idx = cumulative.partition_point(|&c| c <= u).min(sequences.len() - 1);
        let x0 = Sequence::new(sequences[idx].clone(), &vocab)?;
        let t = t_sampler.sample(rng);
        let xt = noise(&x0, t, &vocab, rng);
        samples.push(loss(model, &x0, t, &xt, spec)?);
    }
    McEstimate::from_samples(&samples)
}

/// `int_{t_min}^{1} t^a (1-t)^b dt` for small integer exponents, by exact
/// binomial expansion of the incomplete Beta integral.
fn beta_integral(a: usize, b: usize, t_min: f64) -> f64 {
    let mut total = 0.0;
    let mut binom = 1.0;
    for k in 0..=b {
        if k > 0 {
            binom *= (b - k + 1) as f64 / k as f64;
        }
        let power = a + k + 1;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (1.0 - t_min.powi(power as i32)) / power as f64;
    }
    total
}

/// Aggregated weight of a mask pattern with `m` of `l` positions masked,
/// integrating the pattern probability (times `1/t` for inverse-t
/// weighting) over the truncated noise-level range.
pub fn pattern_weight(m: usize, l: usize, t_min: f64, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Constant => beta_integral(m, l - m, t_min),
        Weighting::InverseT => {
            assert!(m >= 1, "inverse-t weight needs at least one masked position");
            beta_integral(m - 1, l - m, t_min)
        }
    }
}

type CellKey = (usize, Vec<TokenId>);

/// `(expected loss, per-cell logit gradients, per-cell weight mass)`.
pub type CellGradients = (f64, BTreeMap<CellKey, Vec<f64>>, BTreeMap<CellKey, f64>);

/// Iterates the generative process `(x0, mask pattern)` of `joint` under
/// `spec`, calling `f(cell, label, weight)` for every labeled position with
/// the pattern's aggregated t-weight.
fn for_each_labeled_cell(
    joint: &TabularJoint,
    spec: &ObjectiveSpec,
    t_min: f64,
    f: &mut impl FnMut(CellKey, TokenId, f64),
) -> Result<()> {
    let l = joint.len();
    let vocab = Vocabulary::new(joint.vocab_size() as u32)?;
    let mask = vocab.mask_id();
    for (tokens, p0) in joint.iter() {
        if p0 <= 0.0 {
            continue;
        }
        let x0 = Sequence::new(tokens.clone(), &vocab)?;
        for pattern in 0u32..1 << l {
            let m = pattern.count_ones() as usize;
            if spec.label_masking() && m == 0 {
                continue;
            }
            let w = p0 * pattern_weight(m, l, t_min, spec.weighting());
            let xt_tokens: Vec<TokenId> = (0..l)
                .map(|i| if pattern >> i & 1 == 1 { mask } else { tokens[i] })
                .collect();
            let xt = MaskedSequence::new(xt_tokens, &vocab)?;
            for i in spec.label_positions(&xt) {
                let query = spec.query_context(&x0, &xt, i, &vocab)?;
                let key = spec.cell_key_from_query(&query, i);
                f(key, tokens[i], w);
            }
        }
    }
    Ok(())
}

/// A tabular conditional model: one probability vector per reachable
/// (position, visible-context) cell. Implements [`PredictiveModel`] by
/// cell lookup; unseen contexts are zero-probability errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TabularModelRepr", into = "TabularModelRepr")]
pub struct TabularConditionalModel {
    spec: ObjectiveSpec,
    vocab: Vocabulary,
    seq_len: usize,
    cells: BTreeMap<CellKey, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TabularModelRepr {
    objective: String,
    #[serde(rename = "V")]
    vocab_size: u32,
    #[serde(rename = "L")]
    seq_len: usize,
    cells: Vec<CellRepr>,
}

#[derive(Serialize, Deserialize)]
struct CellRepr {
    position: usize,
    context: Vec<TokenId>,
    probs: Vec<f64>,
}

impl TryFrom<TabularModelRepr> for TabularConditionalModel {
    type Error = Error;
    fn try_from(repr: TabularModelRepr) -> Result<Self> {
        let spec = ObjectiveSpec::parse(&repr.objective)?;
        let vocab = Vocabulary::new(repr.vocab_size)?;
        let cells = repr
            .cells
            .into_iter()
            .map(|c| ((c.position, c.context), c.probs))
            .collect();
        Ok(Self {
            spec,
            vocab,
            seq_len: repr.seq_len,
            cells,
        })
    }
}

impl From<TabularConditionalModel> for TabularModelRepr {
    fn from(m: TabularConditionalModel) -> Self {
        Self {
            objective: m.spec.code(),
            vocab_size: m.vocab.size() as u32,
            seq_len: m.seq_len,
            cells: m
                .cells
                .into_iter()
                .map(|((position, context), probs)| CellRepr {
                    position,
                    context,
                    probs,
                })
                .collect(),
        }
    }
}

impl TabularConditionalModel {
    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn cells(&self) -> &BTreeMap<CellKey, Vec<f64>> {
        &self.cells
    }

    /// Largest per-cell total-variation distance to another model over the
    /// union of cells; a missing cell counts as distance 1.
    pub fn max_cell_tv(&self, other: &TabularConditionalModel) -> f64 {
        let mut worst: f64 = 0.0;
        for (key, p) in &self.cells {
            let d = match other.cells.get(key) {
                Some(q) => 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
                None => 1.0,
            };
            worst = worst.max(d);
        }
        for key in other.cells.keys() {
            if !self.cells.contains_key(key) {
                worst = 1.0_f64.max(worst);
            }
        }
        worst
    }
}

impl PredictiveModel for TabularConditionalModel {
    fn context_scope(&self) -> ContextScope {
        self.spec.model_scope()
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        let key = self.spec.cell_key_from_query(masked, position);
        self.cells
            .get(&key)
            .cloned()
            .ok_or(Error::ZeroProbabilityContext { position })
    }
}

/// Closed-form Bayes-optimal model for an objective over a tabular data
/// distribution: for every reachable (visible-context, position) cell, the
/// exact conditional of the label under the generative process, with mask
/// patterns weighted by their aggregated noise-level integrals.
pub fn objective_optimum(
    joint: &TabularJoint,
    spec: &ObjectiveSpec,
    t_sampler: &TSampler,
) -> Result<TabularConditionalModel> {
    let vocab = Vocabulary::new(joint.vocab_size() as u32)?;
    let v = joint.vocab_size();
    let mut mass: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for_each_labeled_cell(joint, spec, t_sampler.t_min, &mut |key, label, w| {
        mass.entry(key).or_insert_with(|| vec![0.0; v])[label as usize] += w;
    })?;
    let cells = mass
        .into_iter()
        .map(|(key, counts)| {
            let total: f64 = counts.iter().sum();
            (key, counts.into_iter().map(|c| c / total).collect())
        })
        .collect();
    Ok(TabularConditionalModel {
        spec: *spec,
        vocab,
        seq_len: joint.len(),
        cells,
    })
}

/// A tabular model parameterized by per-cell logits, trained by gradient
/// descent on the exact expected objective. Cells are the reachable
/// contexts of the generative process; logits start at zero (uniform
/// predictions).
#[derive(Debug, Clone)]
pub struct TabularLogitModel {
    spec: ObjectiveSpec,
    vocab: Vocabulary,
    seq_len: usize,
    logits: BTreeMap<CellKey, Vec<f64>>,
}

impl TabularLogitModel {
    pub fn new(joint: &TabularJoint, spec: &ObjectiveSpec, t_sampler: &TSampler) -> Result<Self> {
        let vocab = Vocabulary::new(joint.vocab_size() as u32)?;
        let v = joint.vocab_size();
        let mut logits = BTreeMap::new();
        for_each_labeled_cell(joint, spec, t_sampler.t_min, &mut |key, _, _| {
            logits.entry(key).or_insert_with(|| vec![0.0; v]);
        })?;
        Ok(Self {
            spec: *spec,
            vocab,
            seq_len: joint.len(),
            logits,
        })
    }

    pub fn set_logits(&mut self, key: CellKey, logits: Vec<f64>) {
        self.logits.insert(key, logits);
    }

    pub fn cell_keys(&self) -> impl Iterator<Item = &CellKey> {
        self.logits.keys()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Exact expected loss and its gradient with respect to every cell's
    /// logits, from the same generative enumeration the objectives define.
    /// Also returns the total weight landing in each cell.
    pub fn expected_loss_and_grad(
        &self,
        joint: &TabularJoint,
        t_sampler: &TSampler,
    ) -> Result<CellGradients> {
        let v = joint.vocab_size();
        let mut grad: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
        let mut cell_mass: BTreeMap<CellKey, f64> = BTreeMap::new();
        let mut loss_total = 0.0;
        let probs: BTreeMap<CellKey, Vec<f64>> = self
            .logits
            .iter()
            .map(|(k, logit)| (k.clone(), Self::softmax(logit)))
            .collect();
        for_each_labeled_cell(joint, &self.spec, t_sampler.t_min, &mut |key, label, w| {
            let p = probs.get(&key).expect("cells cover the generative process");
            loss_total += w * -p[label as usize].ln();
            let g = grad.entry(key.clone()).or_insert_with(|| vec![0.0; v]);
            for (gi, &pi) in g.iter_mut().zip(p) {
                *gi += w * pi;
            }
            g[label as usize] -= w;
            *cell_mass.entry(key).or_insert(0.0) += w;
        })?;
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((loss_total, grad, cell_mass))
    }

    /// Full-batch gradient descent with momentum. The generative
    /// enumeration does not depend on the logits, so its per-cell label
    /// masses are aggregated once up front; each step then costs one
    /// softmax per cell. Each cell's gradient is normalized by its weight
    /// mass; the objective is separable per cell, so this preconditioning
    /// leaves the minimizer unchanged while making the step size uniform
    /// across rare and common contexts.
    pub fn fit(
        &mut self,
        joint: &TabularJoint,
        t_sampler: &TSampler,
        lr: f64,
        momentum: f64,
        steps: usize,
    ) -> Result<f64> {
        let v = joint.vocab_size();
        let mut mass: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
        for_each_labeled_cell(joint, &self.spec, t_sampler.t_min, &mut |key, label, w| {
            mass.entry(key).or_insert_with(|| vec![0.0; v])[label as usize] += w;
        })?;
        let mut velocity: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
        let mut last_loss = f64::NAN;
        for _ in 0..steps {
            let mut loss_total = 0.0;
            for (key, counts) in &mass {
                let cell_mass: f64 = counts.iter().sum();
                if cell_mass <= 0.0 {
                    continue;
                }
                let theta = self.logits.get_mut(key).expect("cells cover the process");
                let probs = Self::softmax(theta);
                let vel = velocity.entry(key.clone()).or_insert_with(|| vec![0.0; v]);
                for y in 0..v {
                    if counts[y] > 0.0 {
                        loss_total += counts[y] * -probs[y].ln();
                    }
                    let g = probs[y] - counts[y] / cell_mass;
                    vel[y] = momentum * vel[y] + g;
                    theta[y] -= lr * vel[y];
                }
            }
            if !loss_total.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            last_loss = loss_total;
        }
        Ok(last_loss)
    }

    /// Snapshot of the current per-cell distributions.
    pub fn to_conditional(&self) -> TabularConditionalModel {
        TabularConditionalModel {
            spec: self.spec,
            vocab: self.vocab.clone(),
            seq_len: self.seq_len,
            cells: self
                .logits
                .iter()
                .map(|(k, logit)| (k.clone(), Self::softmax(logit)))
                .collect(),
        }
    }
}

impl PredictiveModel for TabularLogitModel {
    fn context_scope(&self) -> ContextScope {
        self.spec.model_scope()
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        let key = self.spec.cell_key_from_query(masked, position);
        self.logits
            .get(&key)
            .map(|logit| Self::softmax(logit))
            .ok_or(Error::ZeroProbabilityContext { position })
    }
}

/// Exact next-token-prediction alignment loss: for each position `i >= 2`
/// (1-based), mask the whole suffix from `i` on and score `-log p(x^i)`,
/// averaged over positions and the data distribution.
pub fn ntp_eval_loss<M: PredictiveModel + ?Sized>(
    model: &M,
    joint: &TabularJoint,
) -> Result<f64> {
    let l = joint.len();
    if l < 2 {
        return Err(Error::ShapeMismatch(
            "next-token evaluation needs length at least 2".into(),
        ));
    }
    let vocab = model.vocab().clone();
    let mask = vocab.mask_id();
    let mut total = 0.0;
    for (tokens, p0) in joint.iter() {
        if p0 <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for i in 1..l {
            let mut query = tokens[..i].to_vec();
            query.extend(std::iter::repeat_n(mask, l - i));
            let query = MaskedSequence::new(query, &vocab)?;
            let p = model.predict_one(&query, i)?;
            let term = -p[tokens[i] as usize].ln();
            if !term.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            acc += term;
        }
        total += p0 * acc / (l - 1) as f64;
    }
    Ok(total)
}

/// Monte-Carlo next-token-prediction loss over a corpus of full sequences.
pub fn ntp_eval_loss_corpus<M: PredictiveModel + ?Sized>(
    model: &M,
    corpus: &crate::corpus::Corpus,
) -> Result<McEstimate> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = model.vocab().clone();
    let mask = vocab.mask_id();
    let mut samples = Vec::with_capacity(corpus.len());
    for (sample_idx, sample) in corpus.samples().iter().enumerate() {
        let tokens = sample.full_tokens();
        let l = tokens.len();
        if l < 2 {
            return Err(Error::ShapeMismatch(format!(
                "sample {sample_idx} too short for next-token evaluation"
            )));
        }
        let mut acc = 0.0;
        for i in 1..l {
            let mut query = tokens[..i].to_vec();
            query.extend(std::iter::repeat_n(mask, l - i));
            let query = MaskedSequence::new(query, &vocab)?;
            let p = model.predict_one(&query, i)?;
            let term = -p[tokens[i] as usize].ln();
            if !term.is_finite() {
                return Err(Error::ZeroProbabilityToken {
                    sample: sample_idx,
                    position: i,
                    token: tokens[i],
                });
            }
            acc += term;
        }
        samples.push(acc / (l - 1) as f64);
    }
    McEstimate::from_samples(&samples)
}
