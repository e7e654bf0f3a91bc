//! # masklab
//!
//! An exact, desk-scale laboratory for masked-diffusion text generation.
//!
//! The crate simulates block-wise denoising decoding over small token
//! alphabets where every distribution is an explicit table, so entropy
//! claims about remasking strategies can be checked by enumeration instead
//! of sampling alone. It provides:
//!
//! - the Bernoulli masking process and exact tabular / factorized data
//!   distributions ([`vocab`], [`dist`]);
//! - Bayes-exact predictive oracles and a small trainable sequence model
//!   with handwritten backprop ([`model`], [`train`]);
//! - the eight interpolated training objectives spanning autoregressive and
//!   diffusion losses, their closed-form tabular optima, and the
//!   next-token-prediction alignment loss ([`objectives`]);
//! - block-wise decoding with sequential, confidence, entropy and random
//!   remasking, optional bias-eliminating resampling, and an exact
//!   generation-distribution enumerator ([`decoding`]);
//! - corpus metrics: n-gram entropy, autoregressive entropy estimates,
//!   cross-entropy between strategies, semantic coherence and diversity
//!   over pluggable embedders ([`metrics`], [`corpus`]);
//! - numeric verification of the entropy-reduction theorem, its
//!   majorization machinery, and the entropy inequality chain ([`theory`]).

pub mod corpus;
pub mod decoding;
pub mod dist;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
