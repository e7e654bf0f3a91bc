//! `masklab train`: one model per objective code, stopped when the shared
//! next-token-prediction target is reached, with loss-curve CSVs and JSON
//! checkpoints.

use std::io::Write;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use masklab::model::OracleCausal;
use masklab::objectives::{
    ntp_eval_loss, objective_optimum, ObjectiveSpec, TSampler, TabularLogitModel,
};
use masklab::rng::{derive_seed, stream_rng};
use masklab::train::{objective_grad, SgdMomentum, TrainItem, TrainableArch, TrainableModel};
use masklab::vocab::{noise, Sequence, TokenId};

use super::{ensure_dir, write_json};
use crate::config::{resolve_data, Checkpoint, ExperimentConfig, TrainMode};
use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: ExperimentConfig,
    pub ntp_target: f64,
    pub entries: Vec<TrainEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainEntry {
    pub objective: String,
    pub steps: usize,
    pub final_loss: f64,
    pub final_ntp: f64,
    pub reached_target: bool,
    /// Tabular mode only: worst per-cell total variation against the
    /// closed-form optimum.
    pub optimum_tv: Option<f64>,
    pub checkpoint: String,
    pub curve: String,
}

struct CurveWriter {
    file: std::fs::File,
}

impl CurveWriter {
    fn new(path: &Path, header: &str) -> Result<Self, CliError> {
        let mut file =
            std::fs::File::create(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(file, "{header}").map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(Self { file })
    }

    fn row(&mut self, step: usize, loss: f64, ntp: f64) -> Result<(), CliError> {
        writeln!(self.file, "{step},{loss},{ntp}")
            .map_err(|e| CliError::Runtime(e.to_string()))
    }
}

pub fn run(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = resolve_data(config)?;
    let joint = data.joint()?.clone();
    let specs = config.objective_specs()?;
    let section = &config.train;
    let sampler =
        TSampler::new(section.t_min).map_err(|e| CliError::Config(e.to_string()))?;

    let causal_ntp = ntp_eval_loss(&OracleCausal::new(joint.clone()), &joint)?;
    let target = section.ntp_target.unwrap_or(1.05 * causal_ntp);

    let dir = out.join("train");
    ensure_dir(&dir)?;
    let mut entries = Vec::new();
    for (idx, spec) in specs.iter().enumerate() {
        let entry = match section.mode {
            TrainMode::Tabular => {
                train_tabular(config, &joint, spec, &sampler, target, &dir)?
            }
            TrainMode::Trainable => {
                train_neural(config, &data, spec, &sampler, target, idx, &dir)?
            }
        };
        println!(
            "{:<14} steps={:<6} loss={:.6} ntp={:.6} target_reached={}",
            entry.objective, entry.steps, entry.final_loss, entry.final_ntp,
            entry.reached_target
        );
        entries.push(entry);
    }

    let summary = TrainSummary {
        config: config.clone(),
        ntp_target: target,
        entries,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {}", dir.join("summary.json").display());
    Ok(())
}

fn train_tabular(
    config: &ExperimentConfig,
    joint: &masklab::dist::TabularJoint,
    spec: &ObjectiveSpec,
    sampler: &TSampler,
    target: f64,
    dir: &Path,
) -> Result<TrainEntry, CliError> {
    let section = &config.train;
    let mut model = TabularLogitModel::new(joint, spec, sampler)?;
    let curve_path = dir.join(format!("curve_{}.csv", spec.code()));
    let mut curve = CurveWriter::new(&curve_path, "step,expected_loss,ntp_loss")?;

    let mut steps_run = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_ntp = ntp_eval_loss(&model, joint)?;
    curve.row(0, f64::NAN, last_ntp)?;
    let mut reached = last_ntp <= target;
    while steps_run < section.max_steps && !reached {
        let chunk = section.eval_every.min(section.max_steps - steps_run).max(1);
        last_loss = model.fit(joint, sampler, section.lr, section.momentum, chunk)?;
        steps_run += chunk;
        last_ntp = ntp_eval_loss(&model, joint)?;
        curve.row(steps_run, last_loss, last_ntp)?;
        reached = last_ntp <= target;
    }

    let conditional = model.to_conditional();
    let optimum = objective_optimum(joint, spec, sampler)?;
    let optimum_tv = conditional.max_cell_tv(&optimum);
    let checkpoint_file = format!("checkpoint_{}.json", spec.code());
    Checkpoint::Tabular(conditional).save(&dir.join(&checkpoint_file))?;

    Ok(TrainEntry {
        objective: spec.code(),
        steps: steps_run,
        final_loss: last_loss,
        final_ntp: last_ntp,
        reached_target: reached,
        optimum_tv: Some(optimum_tv),
        checkpoint: checkpoint_file,
        curve: format!("curve_{}.csv", spec.code()),
    })
}

fn train_neural(
    config: &ExperimentConfig,
    data: &crate::config::ResolvedData,
    spec: &ObjectiveSpec,
    sampler: &TSampler,
    target: f64,
    objective_idx: usize,
    dir: &Path,
) -> Result<TrainEntry, CliError> {
    let section = &config.train;
    let joint = data.joint()?;
    let arch = TrainableArch {
        vocab_size: data.vocab.size() as u32,
        seq_len: data.length,
        embed_dim: section.embed_dim,
        layers: section.layers,
        scope: spec.model_scope(),
    };
    let seed = derive_seed(config.seed, objective_idx as u64);
    let mut model = TrainableModel::init(arch, seed)?;
    let mut optimizer = SgdMomentum::new(section.lr, section.momentum, model.params().len());
    let mut rng = stream_rng(seed, 1);

    let sequences: Vec<Vec<TokenId>> = joint.iter().map(|(t, _)| t).collect();
    let mut cumulative = Vec::with_capacity(sequences.len());
    let mut acc = 0.0;
    for &p in joint.probs() {
        acc += p;
        cumulative.push(acc);
    }
    let curve_path = dir.join(format!("curve_{}.csv", spec.code()));
    let mut curve = CurveWriter::new(&curve_path, "step,batch_loss,ntp_loss")?;
    let mut last_loss = f64::NAN;
    let mut last_ntp = ntp_eval_loss(&model, joint)?;
    curve.row(0, f64::NAN, last_ntp)?;
    let mut reached = last_ntp <= target;
    let mut steps_run = 0usize;
    while steps_run < section.max_steps && !reached {
        let batch: Vec<TrainItem> = (0..section.batch_size)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = cumulative
                    .partition_point(|&c| c <= u)
                    .min(sequences.len() - 1);
                let x0 = Sequence::new(sequences[idx].clone(), &data.vocab)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let t = sampler.sample(&mut rng);
                let xt = noise(&x0, t, &data.vocab, &mut rng);
                Ok(TrainItem { x0, t, xt })
            })
            .collect::<Result<_, CliError>>()?;
        let (loss, grad) = objective_grad(&model, &batch, spec).map_err(|e| match e {
            masklab::Error::NonFiniteLoss => {
                CliError::Runtime(format!("training diverged for {}", spec.code()))
            }
            other => CliError::Runtime(other.to_string()),
        })?;
        model = optimizer.step(&model, &grad)?;
        last_loss = loss;
        steps_run += 1;
        if steps_run.is_multiple_of(section.eval_every) || steps_run == section.max_steps {
            last_ntp = ntp_eval_loss(&model, joint)?;
            curve.row(steps_run, last_loss, last_ntp)?;
            reached = last_ntp <= target;
        }
    }

    let checkpoint_file = format!("checkpoint_{}.json", spec.code());
    Checkpoint::Trainable(model).save(&dir.join(&checkpoint_file))?;
    Ok(TrainEntry {
        objective: spec.code(),
        steps: steps_run,
        final_loss: last_loss,
        final_ntp: last_ntp,
        reached_target: reached,
        optimum_tv: None,
        checkpoint: checkpoint_file,
        curve: format!("curve_{}.csv", spec.code()),
    })
}
