//! End-to-end experiment steps shared by the CLI verbs and the tests.

use std::fmt::Write as _;

use ssmlab_core::calibration::{
    constant_scaling, grad_calibrate, init_factors, spsa_calibrate, CalibrationOutcome, Granularity, ScalingFactors, Target,
};
use ssmlab_core::data::{passkey_grid_eval, PasskeyGrid};
use ssmlab_core::model::{perplexity_by_length, train, PplRow, ToyModel, TrainReport};
use ssmlab_core::norm_lab::{
    closed_form_norm, general_integral, lemma1_check, simulate_state_norm, track_model_state_norms, LambdaLaw, NormExperiment,
    NormResult, StateNormTable,
};
use ssmlab_core::ssm::Scales;
use ssmlab_core::Result;

use crate::config::{BVariance, CalibrationMethod, ExperimentConfig, FactorInit, TaskKind};
use crate::tasks::Task;

/// Build and train a model for the configured task.
pub fn train_model(cfg: &ExperimentConfig, task: &Task) -> Result<(ToyModel, TrainReport)> {
    let mcfg = cfg.model_config();
    let mut model = ToyModel::build(&mcfg)?;
    let report = train(
        &mut model,
        |step| task.training_batch(cfg.seed, step, cfg.train.batch_size, mcfg.train_length),
        &cfg.train,
    )?;
    Ok((model, report))
}

/// Starting factors for `target` under the configured init and granularity.
pub fn initial_factors(cfg: &ExperimentConfig, model: &ToyModel, target: Target) -> Result<ScalingFactors> {
    let gran = cfg.calibration.granularity;
    match cfg.calibration.init {
        FactorInit::Ones => Ok(ScalingFactors::ones_for(model, target, gran)),
        FactorInit::Uniform => {
            let rows = match gran {
                Granularity::PerLayer => 1,
                Granularity::PerGroup => model.config.groups(),
            };
            init_factors(model.blocks.len(), rows, target, gran, cfg.seed)
        }
    }
}

/// Calibrate `target` factors at `calibration.target_length` with the model frozen.
pub fn calibrate_model(cfg: &ExperimentConfig, task: &Task, model: &ToyModel, target: Target) -> Result<CalibrationOutcome> {
    let c = &cfg.calibration;
    let calib_set = task.calibration_set(cfg.seed, c.target_length, c.samples)?;
    let s0 = initial_factors(cfg, model, target)?;
    let opt = c.optimizer(cfg.seed);
    match c.method {
        CalibrationMethod::Spsa => spsa_calibrate(model, &opt, &s0, &calib_set),
        CalibrationMethod::Grad => grad_calibrate(model, &opt, &s0, &calib_set),
    }
}

/// Perplexity at each `eval.lengths` entry on the held-out stream.
pub fn ppl_table(cfg: &ExperimentConfig, task: &Task, model: &ToyModel, scales: &[Scales]) -> Result<Vec<PplRow>> {
    let longest = *cfg.eval.lengths.last().expect("validated non-empty");
    let corpus = task.eval_corpus(cfg.seed, cfg.eval.max_windows * (longest + 1))?;
    perplexity_by_length(model, &corpus, &cfg.eval.lengths, scales, cfg.eval.max_windows)
}

pub fn passkey_grid(cfg: &ExperimentConfig, task: &Task, model: &ToyModel, scales: &[Scales]) -> Result<PasskeyGrid> {
    passkey_grid_eval(
        model,
        &cfg.eval.passkey_lengths,
        &cfg.eval.depths,
        cfg.eval.n_per_cell,
        scales,
        task.filler(),
        Task::grid_seed(cfg.seed),
    )
}

pub fn state_norm_table(cfg: &ExperimentConfig, task: &Task, model: &ToyModel, scales: &[Scales]) -> Result<StateNormTable> {
    let longest = *cfg.eval.lengths.last().expect("validated non-empty");
    let n = cfg.eval.norm_sequences;
    let corpus = task.eval_corpus(cfg.seed, n * longest)?;
    track_model_state_norms(model, &corpus, &cfg.eval.lengths, n, scales)
}

/// The state-norm theory checks for the configured experiment.
pub struct NormlabReport {
    pub simulation: NormResult,
    /// `check,value,reference,rel_err` rows.
    pub summary_csv: String,
}

pub fn normlab_suite(cfg: &ExperimentConfig) -> Result<NormlabReport> {
    let n = &cfg.normlab;
    let law = LambdaLaw::Uniform {
        min: n.lambda_min,
        max: n.lambda_max,
    };
    let exp = match n.b_variance {
        BVariance::HalfOverD => NormExperiment::with_half_over_d(n.d, n.m, law, n.t_max, n.trials, cfg.seed),
        BVariance::InvSqrtD => NormExperiment::with_inv_sqrt_d(n.d, n.m, law, n.t_max, n.trials, cfg.seed),
    };
    let simulation = simulate_state_norm(&exp)?;
    let mut out = String::from("check,value,reference,rel_err\n");
    let mut row = |name: &str, v: f64, r: f64| {
        let rel = if r == 0.0 { (v - r).abs() } else { ((v - r) / r).abs() };
        writeln!(out, "{name},{v:.12e},{r:.12e},{rel:.6e}").unwrap();
    };
    row("mc_vs_closed_form", simulation.mc_estimate, simulation.closed_form);
    let width = n.lambda_max - n.lambda_min;
    if width > 0.0 {
        let uniform = general_integral(|_| 1.0 / width, n.lambda_min, n.lambda_max, simulation.e_bx2)?;
        row(
            "uniform_integral_vs_closed_form",
            uniform,
            closed_form_norm(n.lambda_min, n.lambda_max, simulation.e_bx2)?,
        );
    }
    let bound = lemma1_check(1.0, 1.0, n.d.min(512), 10_000, cfg.seed)?;
    row("input_bound_max_over_bound", bound.max_observed, bound.bound);
    row("input_bound_violations", bound.violations as f64, 0.0);
    Ok(NormlabReport {
        simulation,
        summary_csv: out,
    })
}

/// The five rows of the strategy comparison.
pub const STRATEGIES: [&str; 5] = ["baseline", "constant-A", "constant-delta", "calibrated-A", "calibrated-delta"];

/// Factors produced by one calibration run inside `compare`.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub target: Target,
    /// Length the factors were calibrated at.
    pub length: usize,
    pub outcome: CalibrationOutcome,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// `ppl` for language tasks, `solved` (cells per length) for passkey.
    pub metric: &'static str,
    pub lengths: Vec<usize>,
    /// One row per entry of [`STRATEGIES`].
    pub rows: Vec<Vec<f64>>,
    pub calibrations: Vec<CalibrationRun>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for l in &self.lengths {
            write!(out, ",{}@{l}", self.metric).unwrap();
        }
        out.push('\n');
        for (name, row) in STRATEGIES.iter().zip(&self.rows) {
            out.push_str(name);
            for v in row {
                write!(out, ",{v:.10e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Value of `strategy` at `length`.
    pub fn value(&self, strategy: &str, length: usize) -> Option<f64> {
        let r = STRATEGIES.iter().position(|s| *s == strategy)?;
        let c = self.lengths.iter().position(|l| *l == length)?;
        Some(self.rows[r][c])
    }
}

fn comparison_lengths(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.task.kind {
        TaskKind::Passkey => cfg.eval.passkey_lengths.clone(),
        _ => cfg.eval.lengths.clone(),
    }
}

/// The comparison metric of `scales` at each of `lengths`.
fn evaluate(cfg: &ExperimentConfig, task: &Task, model: &ToyModel, scales: &[Scales], lengths: &[usize]) -> Result<Vec<f64>> {
    let mut sub = cfg.clone();
    if cfg.task.kind == TaskKind::Passkey {
        sub.eval.passkey_lengths = lengths.to_vec();
        let grid = passkey_grid(&sub, task, model, scales)?;
        Ok(grid.solved.iter().map(|r| r.iter().filter(|x| **x).count() as f64).collect())
    } else {
        // the held-out stream is sized by the full suite so every subset sees the same windows
        let rows = ppl_table(cfg, task, model, scales)?;
        Ok(lengths
            .iter()
            .map(|l| rows.iter().find(|r| r.length == *l).expect("subset of eval.lengths").ppl)
            .collect())
    }
}

/// Calibrated row for `target`: one calibration at `target_length`, or one
/// per evaluation length when `calibration.per_length` is set.
fn calibrated_row(
    cfg: &ExperimentConfig,
    task: &Task,
    model: &ToyModel,
    target: Target,
    lengths: &[usize],
    runs: &mut Vec<CalibrationRun>,
) -> Result<Vec<f64>> {
    if !cfg.calibration.per_length {
        let outcome = calibrate_model(cfg, task, model, target)?;
        let row = evaluate(cfg, task, model, &outcome.factors.to_scales(model)?, lengths)?;
        runs.push(CalibrationRun {
            target,
            length: cfg.calibration.target_length,
            outcome,
        });
        return Ok(row);
    }
    let mut row = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut sub = cfg.clone();
        sub.calibration.target_length = l;
        let outcome = calibrate_model(&sub, task, model, target)?;
        row.push(evaluate(cfg, task, model, &outcome.factors.to_scales(model)?, &[l])?[0]);
        runs.push(CalibrationRun { target, length: l, outcome });
    }
    Ok(row)
}

/// Baseline, constant A and Δ scaling, and calibrated A and Δ scaling over
/// the same evaluation suite.
pub fn compare(cfg: &ExperimentConfig, task: &Task, model: &ToyModel) -> Result<Comparison> {
    let lengths = comparison_lengths(cfg);
    let factor = cfg.eval.constant_factor;
    let mut rows = vec![
        evaluate(cfg, task, model, &model.identity_scales(), &lengths)?,
        evaluate(cfg, task, model, &constant_scaling(model, factor, Target::A)?.scales, &lengths)?,
        evaluate(cfg, task, model, &constant_scaling(model, factor, Target::Delta)?.scales, &lengths)?,
    ];
    let mut calibrations = Vec::new();
    for target in [Target::A, Target::Delta] {
        rows.push(calibrated_row(cfg, task, model, target, &lengths, &mut calibrations)?);
    }
    Ok(Comparison {
        metric: if cfg.task.kind == TaskKind::Passkey { "solved" } else { "ppl" },
        lengths,
        rows,
        calibrations,
    })
}
