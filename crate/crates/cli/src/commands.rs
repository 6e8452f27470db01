//! One function per CLI verb. Each writes its artifacts into the run directory.

use std::path::Path;

use ssmlab_core::calibration::{ScalingFactors, Target};
use ssmlab_core::data::SYMBOLIC_VOCAB;
use ssmlab_core::model::{self, ppl_csv, ToyModel};
use ssmlab_core::spectrum::spectrum_heatmap;
use ssmlab_core::ssm::Scales;
use ssmlab_core::{Error, Result};

use crate::config::{ExperimentConfig, TaskKind};
use crate::pipeline;
use crate::run::RunDir;
use crate::tasks::Task;

pub const CHECKPOINT_NAME: &str = "model.ssmx";

/// Load a checkpoint and check that it can serve the configured task.
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<ToyModel> {
    let model = model::load(path)?;
    let needed = match cfg.task.kind {
        TaskKind::Text => 256,
        _ => SYMBOLIC_VOCAB,
    };
    if model.config.vocab_size < needed {
        return Err(Error::Config(format!(
            "checkpoint {} has vocab_size {} but the {:?} task needs {needed}",
            path.display(),
            model.config.vocab_size,
            cfg.task.kind
        )));
    }
    Ok(model)
}

/// Scales from an optional factor file; identity when absent.
pub fn load_scales(model: &ToyModel, factors: Option<&Path>) -> Result<Vec<Scales>> {
    match factors {
        None => Ok(model.identity_scales()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ScalingFactors::from_json(&text)?.to_scales(model)
        }
    }
}

fn target_tag(t: Target) -> &'static str {
    match t {
        Target::A => "A",
        Target::Delta => "delta",
    }
}

pub fn train(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<ToyModel> {
    let task = Task::new(&cfg.task)?;
    let (model, report) = pipeline::train_model(cfg, &task)?;
    run.write(CHECKPOINT_NAME, model::to_bytes(&model)?)?;
    run.write("loss_curve.csv", report.to_csv())?;
    Ok(model)
}

pub fn spectrum(run: &mut RunDir, checkpoint: &Path) -> Result<()> {
    let model = model::load(checkpoint)?;
    let report = spectrum_heatmap(model.ssm_layers())?;
    run.write("spectrum.csv", report.to_csv())?;
    run.write("spectrum_summary.csv", report.summary_csv())?;
    Ok(())
}

/// Theory checks, plus the per-length state-norm table of a trained model
/// when a checkpoint is given.
pub fn normlab(run: &mut RunDir, cfg: &ExperimentConfig, checkpoint: Option<&Path>, factors: Option<&Path>) -> Result<()> {
    if let Some(ck) = checkpoint {
        let model = load_checkpoint(ck, cfg)?;
        let scales = load_scales(&model, factors)?;
        let task = Task::new(&cfg.task)?;
        let table = pipeline::state_norm_table(cfg, &task, &model, &scales)?;
        run.write("state_norms.csv", table.to_csv())?;
    }
    let report = pipeline::normlab_suite(cfg)?;
    run.write("norm_trace.csv", report.simulation.trace_csv())?;
    run.write("normlab_summary.csv", report.summary_csv)?;
    Ok(())
}

pub fn calibrate(run: &mut RunDir, cfg: &ExperimentConfig, checkpoint: &Path, target: Target) -> Result<()> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let task = Task::new(&cfg.task)?;
    let outcome = pipeline::calibrate_model(cfg, &task, &model, target)?;
    run.write("calibration_trace.csv", outcome.trace.to_csv())?;
    run.write(
        "scaling_factors.json",
        outcome.factors.to_json(cfg.seed, &cfg.calibration.optimizer(cfg.seed)),
    )?;
    Ok(())
}

pub fn eval_ppl(run: &mut RunDir, cfg: &ExperimentConfig, checkpoint: &Path, factors: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let scales = load_scales(&model, factors)?;
    let task = Task::new(&cfg.task)?;
    let rows = pipeline::ppl_table(cfg, &task, &model, &scales)?;
    run.write("ppl.csv", ppl_csv(&rows))?;
    Ok(())
}

pub fn eval_passkey(run: &mut RunDir, cfg: &ExperimentConfig, checkpoint: &Path, factors: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint, cfg)?;
    let scales = load_scales(&model, factors)?;
    let task = Task::new(&cfg.task)?;
    let grid = pipeline::passkey_grid(cfg, &task, &model, &scales)?;
    run.write("passkey_accuracy.csv", grid.accuracy_csv())?;
    run.write("passkey_solved.csv", grid.solved_csv())?;
    Ok(())
}

/// Trains first when no checkpoint is given.
pub fn compare(run: &mut RunDir, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let task = Task::new(&cfg.task)?;
    let model = match checkpoint {
        Some(ck) => load_checkpoint(ck, cfg)?,
        None => train(run, cfg)?,
    };
    let cmp = pipeline::compare(cfg, &task, &model)?;
    for c in &cmp.calibrations {
        let stem = format!("{}_L{}", target_tag(c.target), c.length);
        run.write(&format!("calibration_trace_{stem}.csv"), c.outcome.trace.to_csv())?;
        run.write(
            &format!("scaling_factors_{stem}.json"),
            c.outcome.factors.to_json(cfg.seed, &cfg.calibration.optimizer(cfg.seed)),
        )?;
    }
    run.write("compare.csv", cmp.to_csv())?;
    Ok(())
}
