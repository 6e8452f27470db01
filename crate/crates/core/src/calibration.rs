//! Training-free calibration of per-layer scaling factors.
//!
//! Factors `S ∈ R₊^{d_s × L}` multiply either the diagonal of `A` or the
//! step sizes `Δ` through the hooks in [`crate::ssm::discretize`]; model
//! weights are never touched. Two optimizers are provided: two-sided SPSA
//! (forward passes only) and Adam on the exact gradient `∂loss/∂S`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Sequence, ToyModel};
use crate::rng;
use crate::ssm::Scales;

/// Lower clamp applied after every update.
pub const FACTOR_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    A,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One factor per layer (`d_s = 1`).
    PerLayer,
    /// One factor per channel (Mamba) or head (Mamba2).
    PerGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    /// `d_s × L`: column `l` holds layer `l`'s factors.
    pub values: Matrix,
    pub target: Target,
    pub granularity: Granularity,
}

impl ScalingFactors {
    pub fn constant(layers: usize, d_s: usize, value: f64, target: Target, granularity: Granularity) -> Self {
        Self {
            values: Matrix::from_vec(d_s, layers, vec![value; d_s * layers]),
            target,
            granularity,
        }
    }

    pub fn ones_for(model: &ToyModel, target: Target, granularity: Granularity) -> Self {
        Self::constant(model.blocks.len(), factor_rows(model, granularity), 1.0, target, granularity)
    }

    pub fn layers(&self) -> usize {
        self.values.cols
    }

    pub fn clamp(&mut self) {
        self.values.data.iter_mut().for_each(|v| *v = v.max(FACTOR_FLOOR));
    }

    pub fn min(&self) -> f64 {
        self.values.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-layer hook values for `model`.
    pub fn to_scales(&self, model: &ToyModel) -> Result<Vec<Scales>> {
        let rows = factor_rows(model, self.granularity);
        if self.values.rows != rows || self.values.cols != model.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "factors are {}×{}, model needs {rows}×{}",
                self.values.rows,
                self.values.cols,
                model.blocks.len()
            )));
        }
        if self.values.data.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("scaling factors must be positive and finite".into()));
        }
        let groups = model.config.groups();
        Ok((0..self.layers())
            .map(|l| {
                let per: Vec<f64> = (0..groups)
                    .map(|g| match self.granularity {
                        Granularity::PerLayer => self.values.get(0, l),
                        Granularity::PerGroup => self.values.get(g, l),
                    })
                    .collect();
                match self.target {
                    Target::A => Scales { a: per, delta: vec![1.0; groups] },
                    Target::Delta => Scales { a: vec![1.0; groups], delta: per },
                }
            })
            .collect())
    }

    /// Layer-indexed JSON artifact.
    pub fn to_json(&self, seed: u64, config: &CalibrationConfig) -> String {
        let layers: Vec<Vec<f64>> = (0..self.layers())
            .map(|l| (0..self.values.rows).map(|r| self.values.get(r, l)).collect())
            .collect();
        let doc = serde_json::json!({
            "target": self.target,
            "granularity": self.granularity,
            "seed": seed,
            "config": config,
            "layers": layers,
        });
        serde_json::to_string_pretty(&doc).expect("plain JSON values serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            target: Target,
            granularity: Granularity,
            layers: Vec<Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Config(format!("scaling factors: {e}")))?;
        let rows = doc.layers.first().map_or(0, Vec::len);
        if rows == 0 || doc.layers.iter().any(|l| l.len() != rows) {
            return Err(Error::Config("scaling factors: layers must be non-empty and equally sized".into()));
        }
        let mut values = Matrix::zeros(rows, doc.layers.len());
        for (l, col) in doc.layers.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                values.set(r, l, *v);
            }
        }
        Ok(Self {
            values,
            target: doc.target,
            granularity: doc.granularity,
        })
    }
}

fn factor_rows(model: &ToyModel, granularity: Granularity) -> usize {
    match granularity {
        Granularity::PerLayer => 1,
        Granularity::PerGroup => model.config.groups(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// SPSA perturbation magnitude.
    pub c: f64,
    pub eta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            c: 0.01,
            eta: 0.05,
            iterations: 300,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.eta > 0.0 && self.c.is_finite() && self.eta.is_finite()) {
            return Err(Error::Config("calibration needs c > 0 and eta > 0".into()));
        }
        Ok(())
    }
}

/// Entries i.i.d. uniform on `(0, 1]`, floored at [`FACTOR_FLOOR`].
pub fn init_factors(layers: usize, d_s: usize, target: Target, granularity: Granularity, seed: u64) -> Result<ScalingFactors> {
    if layers == 0 || d_s == 0 {
        return Err(Error::InvalidArgument("factor matrix needs L, d_s >= 1".into()));
    }
    if granularity == Granularity::PerLayer && d_s != 1 {
        return Err(Error::InvalidArgument("per-layer factors have d_s = 1".into()));
    }
    let mut rng = rng::stream(seed, 0x5CA1E);
    let data = (0..layers * d_s)
        .map(|_| (1.0 - rng.gen::<f64>()).max(FACTOR_FLOOR))
        .collect();
    Ok(ScalingFactors {
        values: Matrix::from_vec(d_s, layers, data),
        target,
        granularity,
    })
}

/// Mean next-token cross-entropy of `model` under `s` on `calib_set`.
/// A state overflow, a non-finite output, or a factor outside `(0, ∞)` (which
/// SPSA perturbations of entries near the floor can produce) yields `+∞`.
pub fn eval_loss(model: &ToyModel, s: &ScalingFactors, calib_set: &[Sequence]) -> Result<f64> {
    if s.values.data.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Ok(f64::INFINITY);
    }
    let scales = s.to_scales(model)?;
    match model.mean_loss(calib_set, &scales) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Ok(f64::INFINITY),
        Err(e) if e.is_numeric() => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub min_s: f64,
    pub max_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTrace {
    pub rows: Vec<TraceRow>,
}

impl CalibrationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,min_S,max_S\n");
        for r in &self.rows {
            writeln!(out, "{},{:.10e},{:.10e},{:.10e}", r.iteration, r.loss, r.min_s, r.max_s).unwrap();
        }
        out
    }

    fn push(&mut self, iteration: usize, loss: f64, s: &Matrix) {
        let (mn, mx) = s.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        self.rows.push(TraceRow {
            iteration,
            loss,
            min_s: mn,
            max_s: mx,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub values: Matrix,
    pub trace: CalibrationTrace,
}

fn clamp_matrix(m: &mut Matrix) {
    m.data.iter_mut().for_each(|v| *v = v.max(FACTOR_FLOOR));
}

/// One two-sided SPSA estimate `(f(S + cδ) − f(S − cδ)) / (2c) · δ`.
pub fn spsa_gradient<F>(f: &F, s: &Matrix, c: f64, rng: &mut impl Rng) -> Result<(Matrix, f64, f64)>
where
    F: Fn(&Matrix) -> Result<f64> + Sync,
{
    let delta: Vec<f64> = (0..s.data.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut plus = s.clone();
    let mut minus = s.clone();
    for k in 0..delta.len() {
        plus.data[k] += c * delta[k];
        minus.data[k] -= c * delta[k];
    }
    let (lp, lm) = rayon::join(|| f(&plus), || f(&minus));
    let (lp, lm) = (lp?, lm?);
    let scale = (lp - lm) / (2.0 * c);
    let g = Matrix::from_vec(s.rows, s.cols, delta.iter().map(|d| scale * d).collect());
    Ok((g, lp, lm))
}

/// SPSA on an arbitrary objective.
///
/// Perturbed points are projected onto `[FACTOR_FLOOR, ∞)` before they are
/// evaluated. When exactly one side evaluates to `+∞`, the iterate takes a step of
/// size `η·c` along the perturbation direction away from that side. When
/// both sides are non-finite the iterate holds; more than ten such
/// iterations in a row abort.
pub fn spsa_minimize<F>(f: F, s0: &Matrix, cfg: &CalibrationConfig) -> Result<Minimized>
where
    F: Fn(&Matrix) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let mut s = s0.clone();
    clamp_matrix(&mut s);
    let mut rng = rng::stream(cfg.seed, 0x5B5A);
    let mut trace = CalibrationTrace::default();
    let mut both_bad = 0usize;
    for it in 0..cfg.iterations {
        let delta: Vec<f64> = (0..s.data.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut plus = s.clone();
        let mut minus = s.clone();
        for k in 0..delta.len() {
            plus.data[k] += cfg.c * delta[k];
            minus.data[k] -= cfg.c * delta[k];
        }
        // entries within c of the floor would otherwise be evaluated at
        // non-positive factors
        clamp_matrix(&mut plus);
        clamp_matrix(&mut minus);
        let (lp, lm) = rayon::join(|| f(&plus), || f(&minus));
        let (lp, lm) = (lp?, lm?);
        let scale = (lp - lm) / (2.0 * cfg.c);
        match (lp.is_finite(), lm.is_finite()) {
            (true, true) if scale.is_finite() => {
                both_bad = 0;
                for k in 0..delta.len() {
                    s.data[k] -= cfg.eta * scale * delta[k];
                }
            }
            (true, true) | (false, true) | (true, false) => {
                // one side exploded, or the two finite losses are so far apart
                // that the estimate overflows: step towards the smaller side
                both_bad = 0;
                let away = if lp < lm { 1.0 } else { -1.0 };
                for k in 0..delta.len() {
                    s.data[k] += away * cfg.eta * cfg.c * delta[k];
                }
            }
            (false, false) => {
                both_bad += 1;
                if both_bad > 10 {
                    return Err(Error::CalibrationAborted {
                        iteration: it,
                        reason: "both perturbed losses non-finite for more than 10 consecutive iterations".into(),
                    });
                }
            }
        }
        clamp_matrix(&mut s);
        let shown = if lp.is_finite() && lm.is_finite() { 0.5 * (lp + lm) } else { lp.min(lm) };
        trace.push(it, shown, &s);
    }
    Ok(Minimized { values: s, trace })
}

/// Adam (0.9 / 0.999 / 1e-8) on an objective with exact gradients, clamping
/// after every step.
pub fn grad_minimize<F>(f: F, s0: &Matrix, cfg: &CalibrationConfig) -> Result<Minimized>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    cfg.validate()?;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut s = s0.clone();
    clamp_matrix(&mut s);
    let mut m = vec![0.0; s.data.len()];
    let mut v = vec![0.0; s.data.len()];
    let mut trace = CalibrationTrace::default();
    for it in 0..cfg.iterations {
        let (loss, g) = f(&s)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::CalibrationAborted {
                iteration: it,
                reason: "non-finite loss or gradient".into(),
            });
        }
        let t = (it + 1) as i32;
        for k in 0..s.data.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g.data[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g.data[k] * g.data[k];
            let mh = m[k] / (1.0 - b1.powi(t));
            let vh = v[k] / (1.0 - b2.powi(t));
            s.data[k] -= cfg.eta * mh / (vh.sqrt() + eps);
        }
        clamp_matrix(&mut s);
        trace.push(it, loss, &s);
    }
    Ok(Minimized { values: s, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub factors: ScalingFactors,
    pub trace: CalibrationTrace,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Model checksum before and after; always equal.
    pub checksum: String,
}

fn check_calib_set(calib_set: &[Sequence]) -> Result<()> {
    if calib_set.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    Ok(())
}

fn frozen_guard(model: &ToyModel, before: &str) -> Result<()> {
    let after = model.checksum();
    if after != before {
        return Err(Error::CalibrationAborted {
            iteration: 0,
            reason: format!("model parameters changed during calibration ({before} -> {after})"),
        });
    }
    Ok(())
}

/// SPSA calibration of `s0` on `calib_set` with the model frozen.
pub fn spsa_calibrate(model: &ToyModel, cfg: &CalibrationConfig, s0: &ScalingFactors, calib_set: &[Sequence]) -> Result<CalibrationOutcome> {
    check_calib_set(calib_set)?;
    s0.to_scales(model)?;
    let checksum = model.checksum();
    let wrap = |values: &Matrix| ScalingFactors {
        values: values.clone(),
        target: s0.target,
        granularity: s0.granularity,
    };
    let initial_loss = eval_loss(model, s0, calib_set)?;
    let out = spsa_minimize(|m| eval_loss(model, &wrap(m), calib_set), &s0.values, cfg)?;
    let factors = wrap(&out.values);
    let final_loss = eval_loss(model, &factors, calib_set)?;
    frozen_guard(model, &checksum)?;
    Ok(CalibrationOutcome {
        factors,
        trace: out.trace,
        initial_loss,
        final_loss,
        checksum,
    })
}

/// Mean loss and exact `∂loss/∂S` for the factor layout of `s`.
pub fn loss_and_factor_grad(model: &ToyModel, s: &ScalingFactors, calib_set: &[Sequence]) -> Result<(f64, Matrix)> {
    let scales = s.to_scales(model)?;
    let lg = model.loss_and_grads(calib_set, &scales, false, true)?;
    let sg = lg.scales.as_ref().expect("scale gradients requested");
    let per_layer = match s.target {
        Target::A => &sg.a,
        Target::Delta => &sg.delta,
    };
    let mut g = Matrix::zeros(s.values.rows, s.values.cols);
    for (l, groups) in per_layer.iter().enumerate() {
        match s.granularity {
            Granularity::PerLayer => g.set(0, l, groups.iter().sum()),
            Granularity::PerGroup => groups.iter().enumerate().for_each(|(k, v)| g.set(k, l, *v)),
        }
    }
    Ok((lg.mean_loss(), g))
}

/// Gradient-based calibration of `s0` on `calib_set` with the model frozen.
pub fn grad_calibrate(model: &ToyModel, cfg: &CalibrationConfig, s0: &ScalingFactors, calib_set: &[Sequence]) -> Result<CalibrationOutcome> {
    check_calib_set(calib_set)?;
    s0.to_scales(model)?;
    let checksum = model.checksum();
    let wrap = |values: &Matrix| ScalingFactors {
        values: values.clone(),
        target: s0.target,
        granularity: s0.granularity,
    };
    let initial_loss = eval_loss(model, s0, calib_set)?;
    let out = grad_minimize(|m| loss_and_factor_grad(model, &wrap(m), calib_set), &s0.values, cfg)?;
    let factors = wrap(&out.values);
    let final_loss = eval_loss(model, &factors, calib_set)?;
    frozen_guard(model, &checksum)?;
    Ok(CalibrationOutcome {
        factors,
        trace: out.trace,
        initial_loss,
        final_loss,
        checksum,
    })
}

/// A model paired with fixed hook values; the weights are shared, not copied.
#[derive(Debug, Clone)]
pub struct ScaledModel<'a> {
    pub model: &'a ToyModel,
    pub scales: Vec<Scales>,
}

impl ScaledModel<'_> {
    pub fn mean_loss(&self, seqs: &[Sequence]) -> Result<f64> {
        self.model.mean_loss(seqs, &self.scales)
    }
}

/// One factor broadcast to every layer and group.
pub fn constant_scaling(model: &ToyModel, factor: f64, target: Target) -> Result<ScaledModel<'_>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("constant factor must be positive, got {factor}")));
    }
    let s = ScalingFactors::constant(model.blocks.len(), 1, factor, target, Granularity::PerLayer);
    Ok(ScaledModel {
        model,
        scales: s.to_scales(model)?,
    })
}
