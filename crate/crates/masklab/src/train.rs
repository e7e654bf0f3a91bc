//! A small trainable sequence model with handwritten backpropagation, the
//! desk-scale stand-in for the neural models the objectives are meant to
//! train.
//!
//! Architecture: token and position embeddings feed a stack of
//! feature-mixing layers; each layer mixes across positions through a
//! learned `L x L` matrix (strictly lower-triangular under unidirectional
//! scope, so the output at position `i` depends only on inputs before `i`),
//! then applies a shared `d x d` projection and `tanh`. A per-position
//! output projection maps features to `V` logits. The output projection
//! starts at zero, so a fresh model predicts uniform distributions.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ContextScope, PredictiveModel};
use crate::objectives::ObjectiveSpec;
use crate::rng::stream_rng;
use crate::vocab::{MaskedSequence, NoiseLevel, Sequence, TokenId, Vocabulary};

const MAX_PARAMETERS: usize = 100_000;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableArch {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub scope: ContextScope,
}

impl TrainableArch {
    pub fn param_count(&self) -> usize {
        let v = self.vocab_size as usize;
        let l = self.seq_len;
        let d = self.embed_dim;
        (v + 1) * d + l * d + self.layers * (l * l + d * d + d) + l * v * d + l * v
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    mix: usize,
    proj: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    out_proj: usize,
    out_bias: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &TrainableArch) -> Self {
        let v = arch.vocab_size as usize;
        let l = arch.seq_len;
        let d = arch.embed_dim;
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let tok = take((v + 1) * d);
        let pos = take(l * d);
        let layers = (0..arch.layers)
            .map(|_| LayerOffsets {
                mix: take(l * l),
                proj: take(d * d),
                bias: take(d),
            })
            .collect();
        let out_proj = take(l * v * d);
        let out_bias = take(l * v);
        Self {
            tok,
            pos,
            layers,
            out_proj,
            out_bias,
            total: cursor,
        }
    }
}

/// The trainable model: an architecture plus a flat parameter vector. The
/// value is immutable; training produces new values via [`sgd_step`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TrainableRepr", into = "TrainableRepr")]
pub struct TrainableModel {
    arch: TrainableArch,
    seed: u64,
    params: Vec<f64>,
    #[serde(skip)]
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct TrainableRepr {
    arch: TrainableArch,
    seed: u64,
    params: Vec<f64>,
}

impl TryFrom<TrainableRepr> for TrainableModel {
    type Error = Error;
    fn try_from(repr: TrainableRepr) -> Result<Self> {
        let vocab = Vocabulary::new(repr.arch.vocab_size)?;
        let expect = Layout::new(&repr.arch).total;
        if repr.params.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} parameters, architecture wants {expect}",
                repr.params.len()
            )));
        }
        Ok(Self {
            arch: repr.arch,
            seed: repr.seed,
            params: repr.params,
            vocab,
        })
    }
}

impl From<TrainableModel> for TrainableRepr {
    fn from(m: TrainableModel) -> Self {
        Self {
            arch: m.arch,
            seed: m.seed,
            params: m.params,
        }
    }
}

impl TrainableModel {
    /// Seeded initialization: embeddings and mixing weights from symmetric
    /// uniform distributions, output projection and all biases zero.
    pub fn init(arch: TrainableArch, seed: u64) -> Result<Self> {
        if arch.param_count() > MAX_PARAMETERS {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters exceed the desk-scale cap {MAX_PARAMETERS}",
                arch.param_count()
            )));
        }
        if arch.embed_dim == 0 || arch.seq_len == 0 || arch.layers == 0 {
            return Err(Error::ShapeMismatch(
                "embed_dim, seq_len and layers must be positive".into(),
            ));
        }
        let vocab = Vocabulary::new(arch.vocab_size)?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, 0);
        let mut uniform = |scale: f64| scale * (rng.random::<f64>() - 0.5);

        let v = arch.vocab_size as usize;
        let l = arch.seq_len;
        let d = arch.embed_dim;
        for x in params[layout.tok..layout.tok + (v + 1) * d].iter_mut() {
            *x = uniform(1.0);
        }
        for x in params[layout.pos..layout.pos + l * d].iter_mut() {
            *x = uniform(1.0);
        }
        let mix_scale = 2.0 / (l as f64).sqrt();
        let proj_scale = 2.0 / (d as f64).sqrt();
        for offsets in &layout.layers {
            for x in params[offsets.mix..offsets.mix + l * l].iter_mut() {
                *x = uniform(mix_scale);
            }
            for x in params[offsets.proj..offsets.proj + d * d].iter_mut() {
                *x = uniform(proj_scale);
            }
        }
        Ok(Self {
            arch,
            seed,
            params,
            vocab,
        })
    }

    pub fn arch(&self) -> &TrainableArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(self)
    }

    fn in_scope(&self, i: usize, j: usize) -> bool {
        match self.arch.scope {
            ContextScope::Unidirectional => j < i,
            ContextScope::Bidirectional => true,
        }
    }

    fn forward_full(&self, tokens: &[TokenId]) -> ForwardCache {
        let layout = Layout::new(&self.arch);
        let v = self.arch.vocab_size as usize;
        let l = self.arch.seq_len;
        let d = self.arch.embed_dim;
        debug_assert_eq!(tokens.len(), l);

        let mut h = Vec::with_capacity(self.arch.layers + 1);
        let mut h0 = vec![0.0; l * d];
        for i in 0..l {
            let tok = tokens[i] as usize;
            debug_assert!(tok <= v);
            for c in 0..d {
                h0[i * d + c] =
                    self.params[layout.tok + tok * d + c] + self.params[layout.pos + i * d + c];
            }
        }
        h.push(h0);

        let mut mixed_cache = Vec::with_capacity(self.arch.layers);
        for offsets in &layout.layers {
            let prev = h.last().expect("at least the embedding layer");
            let mut mixed = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..l {
                    if !self.in_scope(i, j) {
                        continue;
                    }
                    let m = self.params[offsets.mix + i * l + j];
                    if m == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        mixed[i * d + c] += m * prev[j * d + c];
                    }
                }
            }
            let mut next = vec![0.0; l * d];
            for i in 0..l {
                for c in 0..d {
                    let mut z = self.params[offsets.bias + c];
                    for cc in 0..d {
                        z += self.params[offsets.proj + c * d + cc] * mixed[i * d + cc];
                    }
                    next[i * d + c] = z.tanh();
                }
            }
            mixed_cache.push(mixed);
            h.push(next);
        }

        let top = h.last().expect("stack is nonempty");
        let mut probs = Vec::with_capacity(l);
        for i in 0..l {
            let mut logits = vec![0.0; v];
            for (y, logit) in logits.iter_mut().enumerate() {
                let mut z = self.params[layout.out_bias + i * v + y];
                let row = layout.out_proj + (i * v + y) * d;
                for c in 0..d {
                    z += self.params[row + c] * top[i * d + c];
                }
                *logit = z;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exp_sum = 0.0;
            let mut p: Vec<f64> = logits
                .iter()
                .map(|&x| {
                    let e = (x - max).exp();
                    exp_sum += e;
                    e
                })
                .collect();
            p.iter_mut().for_each(|x| *x /= exp_sum);
            probs.push(p);
        }

        ForwardCache {
            h,
            mixed: mixed_cache,
            probs,
        }
    }

    /// Accumulates parameter gradients for per-position logit gradients
    /// `dlogits` (zeros at unlabeled positions).
    fn accumulate_grad(
        &self,
        tokens: &[TokenId],
        cache: &ForwardCache,
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let layout = Layout::new(&self.arch);
        let v = self.arch.vocab_size as usize;
        let l = self.arch.seq_len;
        let d = self.arch.embed_dim;

        let top = cache.h.last().expect("nonempty");
        let mut dh = vec![0.0; l * d];
        for i in 0..l {
            for y in 0..v {
                let g = dlogits[i][y];
                if g == 0.0 {
                    continue;
                }
                grad[layout.out_bias + i * v + y] += g;
                let row = layout.out_proj + (i * v + y) * d;
                for c in 0..d {
                    grad[row + c] += g * top[i * d + c];
                    dh[i * d + c] += g * self.params[row + c];
                }
            }
        }

        for (k, offsets) in layout.layers.iter().enumerate().rev() {
            let activated = &cache.h[k + 1];
            let mixed = &cache.mixed[k];
            let below = &cache.h[k];
            let mut dz = vec![0.0; l * d];
            for idx in 0..l * d {
                dz[idx] = dh[idx] * (1.0 - activated[idx] * activated[idx]);
            }
            let mut dmixed = vec![0.0; l * d];
            for i in 0..l {
                for c in 0..d {
                    let g = dz[i * d + c];
                    if g == 0.0 {
                        continue;
                    }
                    grad[offsets.bias + c] += g;
                    for cc in 0..d {
                        grad[offsets.proj + c * d + cc] += g * mixed[i * d + cc];
                        dmixed[i * d + cc] += g * self.params[offsets.proj + c * d + cc];
                    }
                }
            }
            let mut dh_below = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..l {
                    if !self.in_scope(i, j) {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += dmixed[i * d + c] * below[j * d + c];
                    }
                    grad[offsets.mix + i * l + j] += dot;
                    let m = self.params[offsets.mix + i * l + j];
                    for c in 0..d {
                        dh_below[j * d + c] += m * dmixed[i * d + c];
                    }
                }
            }
            dh = dh_below;
        }

        for i in 0..l {
            let tok = tokens[i] as usize;
            for c in 0..d {
                grad[layout.tok + tok * d + c] += dh[i * d + c];
                grad[layout.pos + i * d + c] += dh[i * d + c];
            }
        }
    }
}

struct ForwardCache {
    h: Vec<Vec<f64>>,
    mixed: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

impl PredictiveModel for TrainableModel {
    fn context_scope(&self) -> ContextScope {
        self.arch.scope
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.arch.seq_len
    }

    fn predict_one(&self, masked: &MaskedSequence, position: usize) -> Result<Vec<f64>> {
        Ok(self.predict(masked, &[position])?.remove(0))
    }

    fn predict(&self, masked: &MaskedSequence, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        if masked.len() != self.arch.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "input length {} does not match model length {}",
                masked.len(),
                self.arch.seq_len
            )));
        }
        let cache = self.forward_full(masked.tokens());
        Ok(positions.iter().map(|&i| cache.probs[i].clone()).collect())
    }
}

/// One training example: a clean sequence, the noise level, and the noised
/// input derived from it.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Sequence,
    pub t: NoiseLevel,
    pub xt: MaskedSequence,
}

fn check_spec_scope(model: &TrainableModel, spec: &ObjectiveSpec) -> Result<()> {
    if model.arch.scope != spec.model_scope() {
        return Err(Error::ScopeMismatch {
            model: format!("{:?}", model.arch.scope),
            objective: spec.code(),
        });
    }
    Ok(())
}

/// Mean objective loss over a batch, forward passes only. A single pass per
/// item suffices: under unidirectional scope the output at `i` depends only
/// on inputs before `i`, which is exactly the objective's prefix context.
pub fn objective_loss(
    model: &TrainableModel,
    batch: &[TrainItem],
    spec: &ObjectiveSpec,
) -> Result<f64> {
    check_spec_scope(model, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut total = 0.0;
    for item in batch {
        let input = if spec.input_masking() {
            item.xt.tokens()
        } else {
            item.x0.tokens()
        };
        let cache = model.forward_full(input);
        let omega = spec.weight(item.t);
        for i in spec.label_positions(&item.xt) {
            total += omega * -cache.probs[i][item.x0.tokens()[i] as usize].ln();
        }
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(mean)
}

/// Mean loss and its analytic gradient over a batch.
pub fn objective_grad(
    model: &TrainableModel,
    batch: &[TrainItem],
    spec: &ObjectiveSpec,
) -> Result<(f64, Vec<f64>)> {
    check_spec_scope(model, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    let v = model.arch.vocab_size as usize;
    let l = model.arch.seq_len;
    let mut grad = vec![0.0; model.params.len()];
    let mut total = 0.0;
    for item in batch {
        let input: Vec<TokenId> = if spec.input_masking() {
            item.xt.tokens().to_vec()
        } else {
            item.x0.tokens().to_vec()
        };
        let cache = model.forward_full(&input);
        let omega = spec.weight(item.t);
        let mut dlogits = vec![vec![0.0; v]; l];
        for i in spec.label_positions(&item.xt) {
            let y = item.x0.tokens()[i] as usize;
            total += omega * -cache.probs[i][y].ln();
            for (c, slot) in dlogits[i].iter_mut().enumerate() {
                *slot += omega * (cache.probs[i][c] - if c == y { 1.0 } else { 0.0 });
            }
        }
        model.accumulate_grad(&input, &cache, &dlogits, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((mean, grad))
}

/// Pure gradient step: returns a new model with `params - lr * grad`.
pub fn sgd_step(model: &TrainableModel, grad: &[f64], lr: f64) -> Result<TrainableModel> {
    if grad.len() != model.params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient length {} vs parameter length {}",
            grad.len(),
            model.params.len()
        )));
    }
    let params: Vec<f64> = model
        .params
        .iter()
        .zip(grad)
        .map(|(&p, &g)| p - lr * g)
        .collect();
    model.clone().with_params(params)
}

/// Plain SGD with optional momentum; owns the velocity buffer.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, model: &TrainableModel, grad: &[f64]) -> Result<TrainableModel> {
        for (vel, &g) in self.velocity.iter_mut().zip(grad) {
            *vel = self.momentum * *vel + g;
        }
        sgd_step(model, &self.velocity, self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives;
    use crate::rng::root_rng;
    use crate::vocab::noise;

    fn small_arch(scope: ContextScope) -> TrainableArch {
        TrainableArch {
            vocab_size: 3,
            seq_len: 4,
            embed_dim: 6,
            layers: 2,
            scope,
        }
    }

    fn random_batch(model: &TrainableModel, n: usize, seed: u64) -> Vec<TrainItem> {
        let vocab = model.vocab().clone();
        let mut rng = stream_rng(seed, 1);
        (0..n)
            .map(|_| {
                let tokens: Vec<TokenId> = (0..model.seq_len())
                    .map(|_| rng.random_range(0..vocab.size() as u32))
                    .collect();
                let x0 = Sequence::new(tokens, &vocab).unwrap();
                let t = NoiseLevel::new(0.3 + 0.5 * rng.random::<f64>()).unwrap();
                let xt = noise(&x0, t, &vocab, &mut rng);
                TrainItem { x0, t, xt }
            })
            .collect()
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let model = TrainableModel::init(small_arch(ContextScope::Bidirectional), 0).unwrap();
        let vocab = model.vocab().clone();
        let ctx = MaskedSequence::fully_masked(4, &vocab).unwrap();
        for p in model.predict(&ctx, &[0, 1, 2, 3]).unwrap() {
            for x in p {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unidirectional_output_ignores_later_inputs() {
        let model = TrainableModel::init(small_arch(ContextScope::Unidirectional), 1).unwrap();
        // Push parameters away from the zero output projection.
        let mut rng = root_rng(2);
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|&p| p + 0.3 * (rng.random::<f64>() - 0.5))
            .collect();
        let model = model.with_params(params).unwrap();
        let vocab = model.vocab().clone();
        let base = MaskedSequence::new(vec![1, 2, 0, 1], &vocab).unwrap();
        for i in 0..4 {
            let reference = model.predict_one(&base, i).unwrap();
            for j in i..4 {
                for value in 0..3u32 {
                    let changed = base.clone().with_token(j, value);
                    let p = model.predict_one(&changed, i).unwrap();
                    for (a, b) in p.iter().zip(&reference) {
                        assert_eq!(a.to_bits(), b.to_bits(), "position {i} saw input {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn bidirectional_output_reacts_to_every_input() {
        let model = TrainableModel::init(small_arch(ContextScope::Bidirectional), 3).unwrap();
        let mut rng = root_rng(4);
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|&p| p + 0.3 * (rng.random::<f64>() - 0.5))
            .collect();
        let model = model.with_params(params).unwrap();
        let vocab = model.vocab().clone();
        let base = MaskedSequence::new(vec![1, 2, 0, 1], &vocab).unwrap();
        for j in 0..4 {
            let changed = base.clone().with_token(j, if base.tokens()[j] == 0 { 1 } else { 0 });
            let mut moved = false;
            for i in 0..4 {
                let a = model.predict_one(&base, i).unwrap();
                let b = model.predict_one(&changed, i).unwrap();
                if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
                    moved = true;
                }
            }
            assert!(moved, "perturbing input {j} changed nothing");
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        for (scope, code) in [
            (ContextScope::Unidirectional, "uc+im+lm+wf"),
            (ContextScope::Bidirectional, "bc+im+lm"),
        ] {
            let model = TrainableModel::init(small_arch(scope), 5).unwrap();
            let mut rng = root_rng(6);
            let params: Vec<f64> = model
                .params()
                .iter()
                .map(|&p| p + 0.4 * (rng.random::<f64>() - 0.5))
                .collect();
            let model = model.with_params(params).unwrap();
            let spec = ObjectiveSpec::parse(code).unwrap();
            let batch = random_batch(&model, 4, 7);
            let (_, grad) = objective_grad(&model, &batch, &spec).unwrap();

            let h = 1e-4;
            let n = model.params().len();
            for probe in 0..50 {
                let coord = (probe * 7919) % n;
                let mut plus = model.params().to_vec();
                plus[coord] += h;
                let mut minus = model.params().to_vec();
                minus[coord] -= h;
                let lp = objective_loss(
                    &model.clone().with_params(plus).unwrap(),
                    &batch,
                    &spec,
                )
                .unwrap();
                let lm = objective_loss(
                    &model.clone().with_params(minus).unwrap(),
                    &batch,
                    &spec,
                )
                .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let scale = fd.abs().max(grad[coord].abs());
                if scale < 1e-10 {
                    assert!((fd - grad[coord]).abs() < 1e-10);
                } else {
                    let rel = (fd - grad[coord]).abs() / scale;
                    assert!(
                        rel < 1e-4,
                        "{code} coordinate {coord}: fd {fd} vs analytic {}",
                        grad[coord]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_the_identity() {
        let model = TrainableModel::init(small_arch(ContextScope::Unidirectional), 8).unwrap();
        let batch = random_batch(&model, 2, 9);
        let spec = ObjectiveSpec::parse("uc+im").unwrap();
        let (_, grad) = objective_grad(&model, &batch, &spec).unwrap();
        let stepped = sgd_step(&model, &grad, 0.0).unwrap();
        for (a, b) in model.params().iter().zip(stepped.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_pass_loss_equals_per_position_query_loss() {
        for (scope, code) in [
            (ContextScope::Unidirectional, "uc+im+lm"),
            (ContextScope::Unidirectional, "uc"),
            (ContextScope::Bidirectional, "bc+im+lm+wf"),
        ] {
            let model = TrainableModel::init(small_arch(scope), 10).unwrap();
            let mut rng = root_rng(11);
            let params: Vec<f64> = model
                .params()
                .iter()
                .map(|&p| p + 0.3 * (rng.random::<f64>() - 0.5))
                .collect();
            let model = model.with_params(params).unwrap();
            let spec = ObjectiveSpec::parse(code).unwrap();
            for item in random_batch(&model, 6, 12) {
                let fast = objective_loss(&model, std::slice::from_ref(&item), &spec).unwrap();
                let generic =
                    objectives::loss(&model, &item.x0, item.t, &item.xt, &spec).unwrap();
                assert!(
                    (fast - generic).abs() < 1e-12,
                    "{code}: {fast} vs {generic}"
                );
            }
        }
    }

    #[test]
    fn momentum_training_reduces_loss() {
        let model = TrainableModel::init(small_arch(ContextScope::Bidirectional), 13).unwrap();
        let spec = ObjectiveSpec::parse("bc+im+lm").unwrap();
        let batch = random_batch(&model, 8, 14);
        let start = objective_loss(&model, &batch, &spec).unwrap();
        let mut optimizer = SgdMomentum::new(0.05, 0.9, model.params().len());
        let mut current = model;
        for _ in 0..60 {
            let (_, grad) = objective_grad(&current, &batch, &spec).unwrap();
            current = optimizer.step(&current, &grad).unwrap();
        }
        let end = objective_loss(&current, &batch, &spec).unwrap();
        assert!(end < start, "loss {start} -> {end}");
    }

    #[test]
    fn scope_mismatch_is_rejected() {
        let model = TrainableModel::init(small_arch(ContextScope::Unidirectional), 15).unwrap();
        let batch = random_batch(&model, 1, 16);
        let bc = ObjectiveSpec::parse("bc+im+lm").unwrap();
        assert!(matches!(
            objective_grad(&model, &batch, &bc),
            Err(Error::ScopeMismatch { .. })
        ));
        let bi = TrainableModel::init(small_arch(ContextScope::Bidirectional), 15).unwrap();
        let uc = ObjectiveSpec::parse("uc+im").unwrap();
        assert!(matches!(
            objective_grad(&bi, &random_batch(&bi, 1, 16), &uc),
            Err(Error::ScopeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_faithfully() {
        let model = TrainableModel::init(small_arch(ContextScope::Unidirectional), 17).unwrap();
        let s = serde_json::to_string(&model).unwrap();
        assert!(s.contains("\"arch\"") && s.contains("\"seed\"") && s.contains("\"params\""));
        let back: TrainableModel = serde_json::from_str(&s).unwrap();
        assert_eq!(model.params().len(), back.params().len());
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.seed(), 17);
    }

    #[test]
    fn parameter_cap_is_enforced() {
        let arch = TrainableArch {
            vocab_size: 50,
            seq_len: 64,
            embed_dim: 64,
            layers: 4,
            scope: ContextScope::Bidirectional,
        };
        assert!(TrainableModel::init(arch, 0).is_err());
    }

    #[test]
    fn predictions_are_valid_distributions() {
        let model = TrainableModel::init(small_arch(ContextScope::Bidirectional), 19).unwrap();
        let vocab = model.vocab().clone();
        let mut rng = root_rng(20);
        for _ in 0..1000 {
            let tokens: Vec<TokenId> = (0..4)
                .map(|_| {
                    if rng.random::<f64>() < 0.4 {
                        vocab.mask_id()
                    } else {
                        rng.random_range(0..3u32)
                    }
                })
                .collect();
            let ctx = MaskedSequence::new(tokens, &vocab).unwrap();
            for p in model.predict(&ctx, &[0, 1, 2, 3]).unwrap() {
                assert!(p.iter().all(|&x| x >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
