//! `masklab verify`: randomized theorem sweep over exact generation
//! distributions, plus the entropy inequality chain on a desk instance.
//! Exits nonzero when any exact-path check fails.

use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use masklab::decoding::{DecodeConfig, StrategyKind};
use masklab::dist::FactorizedDist;
use masklab::model::OracleFactorized;
use masklab::rng::{derive_seed, stream_rng};
use masklab::theory::{
    inequality_chain_exact, verify_entropy_reduction, InequalityChainReport, TheoremInstance,
};

use super::{ensure_dir, write_json};
use crate::config::{resolve_data, ExperimentConfig};
use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: ExperimentConfig,
    pub instances: Vec<TheoremInstance>,
    pub violations: usize,
    pub chain_instance: Vec<Vec<f64>>,
    pub chain: Vec<InequalityChainReport>,
}

fn random_factors<R: Rng>(rng: &mut R, max_vocab: usize, max_len: usize) -> FactorizedDist {
    let v = rng.random_range(2..=max_vocab);
    let l = rng.random_range(2..=max_len);
    let marginals: Vec<Vec<f64>> = (0..l)
        .map(|_| {
            let mut q: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= s);
            let drift: f64 = 1.0 - q.iter().sum::<f64>();
            q[0] += drift;
            q
        })
        .collect();
    FactorizedDist::new(marginals).expect("normalized rows")
}

/// Instances with exact confidence ties, exercising the position-index
/// oracle order.
fn tie_instances() -> Vec<FactorizedDist> {
    vec![
        FactorizedDist::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).expect("valid"),
        FactorizedDist::new(vec![vec![0.7, 0.3], vec![0.7, 0.3], vec![0.3, 0.7]])
            .expect("valid"),
        FactorizedDist::new(vec![vec![0.6, 0.4], vec![0.4, 0.6]]).expect("valid"),
    ]
}

pub fn run(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let section = &config.verify;
    let cap = config.cap();
    let mut rng = stream_rng(derive_seed(config.seed, 0x7e0), 0);

    let mut instances = Vec::new();
    let mut violations = 0usize;
    for _ in 0..section.instances {
        let factors = random_factors(&mut rng, section.max_vocab, section.max_len);
        let valid: Vec<usize> = section
            .block_lengths
            .iter()
            .copied()
            .filter(|b| factors.len().is_multiple_of(*b))
            .collect();
        if valid.is_empty() {
            continue;
        }
        let block = valid[rng.random_range(0..valid.len())];
        let grid: Vec<(usize, f64)> = section.taus.iter().map(|&tau| (block, tau)).collect();
        let report = verify_entropy_reduction(&factors, &grid, cap, section.corrupt)?;
        violations += report.violations;
        instances.extend(report.instances);
    }
    if section.tie_instances {
        for factors in tie_instances() {
            let valid: Vec<usize> = section
                .block_lengths
                .iter()
                .copied()
                .filter(|b| factors.len() % b == 0)
                .collect();
            let grid: Vec<(usize, f64)> = valid
                .iter()
                .flat_map(|&b| section.taus.iter().map(move |&tau| (b, tau)))
                .collect();
            let report = verify_entropy_reduction(&factors, &grid, cap, section.corrupt)?;
            violations += report.violations;
            instances.extend(report.instances);
        }
    }

    // Inequality chain on the configured factorized data, or on a built-in
    // two-position instance when the data source is not factorized.
    let data = resolve_data(config)?;
    let chain_factors = data.factors.clone().unwrap_or_else(|| {
        FactorizedDist::new(vec![vec![0.9, 0.1], vec![0.6, 0.4]]).expect("valid")
    });
    let model = OracleFactorized::new(chain_factors.clone());
    let l = chain_factors.len();
    let block = section
        .block_lengths
        .iter()
        .copied()
        .filter(|b| l % b == 0 && *b > 1)
        .max()
        .unwrap_or(l);
    let tau = section.taus.last().copied().unwrap_or(0.9);
    let mut chain_configs = vec![
        DecodeConfig::sequential(),
        DecodeConfig::new(StrategyKind::LowConfidence, block),
        DecodeConfig::new(StrategyKind::DynamicLowConfidence, block).with_tau(tau),
        DecodeConfig::new(StrategyKind::HighEntropy, block),
        DecodeConfig::new(StrategyKind::Random, block),
        DecodeConfig::new(StrategyKind::LowConfidence, block).with_bias_elimination(true),
        DecodeConfig::new(StrategyKind::DynamicLowConfidence, block)
            .with_tau(tau)
            .with_bias_elimination(true),
    ];
    for cfg in &mut chain_configs {
        cfg.invert_confidence = section.corrupt;
    }
    let chain = inequality_chain_exact(&model, &[], l, &chain_configs, cap)?;

    let dir = out.join("verify");
    ensure_dir(&dir)?;
    let report = VerifyReport {
        config: config.clone(),
        instances,
        violations,
        chain_instance: chain_factors.marginals().to_vec(),
        chain,
    };
    write_json(&dir.join("verify.json"), &report)?;

    for row in &report.chain {
        println!(
            "chain {:<38} H_con={} H_cross={:.6} H_seq={:.6} delta={:+.3e} ii_holds={}",
            row.strategy,
            row.h_con.map(|h| format!("{h:.6}")).unwrap_or_default(),
            row.h_cross,
            row.h_seq,
            row.delta,
            row.inequality_ii_holds
        );
    }
    println!(
        "theorem sweep: {} instances, {} violations",
        report.instances.len(),
        report.violations
    );
    if report.violations > 0 {
        return Err(CliError::Verification(format!(
            "{} theorem-sweep violations (see {})",
            report.violations,
            dir.join("verify.json").display()
        )));
    }
    Ok(())
}
