//! Monte-Carlo estimate bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Monte-Carlo mean with its standard error. Every sampled quantity in
/// reports carries one of these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n >= 2 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Ok(Self { mean, stderr, n })
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr
    }
}
