//! Adam training loop over a caller-supplied batch source.

use serde::{Deserialize, Serialize};

use super::engine::{ParamGrads, Sequence};
use super::{TensorKind, ToyModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Linear warmup steps before cosine decay to `min_lr_frac · lr`.
    pub warmup: usize,
    pub min_lr_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            warmup: 50,
            min_lr_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Record the loss every this many steps (the final step is always recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(step, batch loss)` pairs.
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.loss_curve {
            out.push_str(&format!("{s},{l:.10e}\n"));
        }
        out
    }
}

/// Steps the loss may stay above 10× its initial value before aborting.
const DIVERGENCE_WINDOW: usize = 100;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &ToyModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &ParamGrads, cfg: &AdamConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let clip = if cfg.grad_clip > 0.0 {
            (cfg.grad_clip / grads.norm()).min(1.0)
        } else {
            1.0
        };
        let kinds: Vec<TensorKind> = model.tensor_specs().into_iter().map(|s| s.kind).collect();
        for (ti, tensor) in model.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for (k, p) in tensor.iter_mut().enumerate() {
                let mut g = grads.tensors[ti][k] * clip;
                if kinds[ti] == TensorKind::LogPositive {
                    // chain rule to log(p); the update is multiplicative
                    g *= *p;
                }
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let upd = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                match kinds[ti] {
                    TensorKind::Plain => *p -= upd,
                    TensorKind::LogPositive => *p *= (-upd).exp(),
                }
            }
        }
    }
}

fn schedule(cfg: &AdamConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = total.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cos)
}

/// Trains `model` in place. `batches(step)` must return the batch for that
/// step; it is called exactly once per step, in order.
pub fn train<F>(model: &mut ToyModel, mut batches: F, cfg: &TrainConfig) -> Result<TrainReport>
where
    F: FnMut(usize) -> Result<Vec<Sequence>>,
{
    let opt = cfg.optimizer;
    if !(opt.lr >= 0.0 && opt.eps > 0.0 && (0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2)) {
        return Err(Error::Config("invalid optimizer settings".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(model);
    let scales = model.identity_scales();
    let mut curve = Vec::new();
    let mut initial = f64::NAN;
    let mut above = 0usize;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let batch = batches(step)?;
        let lg = model.loss_and_grads(&batch, &scales, true, false)?;
        let loss = lg.mean_loss();
        let grads = lg.params.expect("parameter gradients requested");
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("loss or gradient at training step {step}")));
        }
        if step == 0 {
            initial = loss;
        }
        above = if loss > 10.0 * initial { above + 1 } else { 0 };
        if above >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
                window: DIVERGENCE_WINDOW,
            });
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((model.steps_trained + step, loss));
        }
        let lr = schedule(&opt, step, cfg.steps);
        if lr > 0.0 {
            adam.step(model, &grads, &opt, lr);
        }
        last = loss;
    }
    model.steps_trained += cfg.steps;
    if cfg.steps > 0 {
        model.final_loss = last;
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModelConfig, VariantKind};

    fn cfg() -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: 6,
            d_model: 8,
            d_state: 4,
            layers: 1,
            variant: VariantKind::Mamba,
            heads: 1,
            train_length: 32,
            seed: 3,
            ..Default::default()
        }
    }

    fn cycle_batch(_: usize) -> Result<Vec<Sequence>> {
        let tokens: Vec<u32> = (0..33).map(|t| (t % 6) as u32).collect();
        Ok(vec![Sequence::unmasked(tokens)])
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = ToyModel::build(&cfg()).unwrap();
        let before = m.checksum();
        let tc = TrainConfig {
            steps: 5,
            optimizer: AdamConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        train(&mut m, cycle_batch, &tc).unwrap();
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn learns_a_cycle() {
        let mut m = ToyModel::build(&cfg()).unwrap();
        let tc = TrainConfig {
            steps: 150,
            optimizer: AdamConfig { lr: 1e-2, warmup: 10, ..Default::default() },
            ..Default::default()
        };
        let rep = train(&mut m, cycle_batch, &tc).unwrap();
        assert!(rep.final_loss < 0.1 * rep.loss_curve[0].1, "{rep:?}");
        assert_eq!(m.steps_trained, 150);
        assert!(m.blocks[0].ssm.a_diag.iter().all(|a| *a > 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let tc = TrainConfig { steps: 20, ..Default::default() };
        let mut a = ToyModel::build(&cfg()).unwrap();
        let mut b = ToyModel::build(&cfg()).unwrap();
        let ra = train(&mut a, cycle_batch, &tc).unwrap();
        let rb = train(&mut b, cycle_batch, &tc).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn divergence_is_detected() {
        let mut m = ToyModel::build(&cfg()).unwrap();
        // a huge unclipped learning rate drives the loss far above its start
        let tc = TrainConfig {
            steps: 400,
            optimizer: AdamConfig { lr: 50.0, grad_clip: 0.0, warmup: 1, min_lr_frac: 1.0, ..Default::default() },
            ..Default::default()
        };
        let err = train(&mut m, cycle_batch, &tc).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }
}
