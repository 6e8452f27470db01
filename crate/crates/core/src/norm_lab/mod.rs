//! Expected state norm of diagonal linear recurrences.
//!
//! For `h_t = Λ h_{t-1} + B x_t` with `Λ = diag(λ)`, `λ_i` i.i.d. from a
//! density `p` on `[λ_min, λ_max] ⊂ [0, 1)`, rows of `B` i.i.d. isotropic
//! Gaussian and `x_t ~ N(0, I)`, the stationary covariance is diagonal with
//! entries `‖b_i‖²/(1 − λ_i²)`, so
//!
//! ```text
//! E‖h_∞‖² = E‖Bx‖² · ∫ p(λ) / (1 − λ²) dλ
//! ```
//!
//! For the uniform law the integral has the closed form
//! `(artanh λ_max − artanh λ_min)/(λ_max − λ_min)`. This module checks that
//! against simulation and quadrature, and studies its endpoint behavior.

mod quad;
mod tracking;

pub use quad::{integrate, Quadrature};
pub use tracking::{track_model_state_norms, StateNormRow, StateNormTable};

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gemm, norm2, Matrix, Op};
use crate::rng;

/// Distribution of the diagonal eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaLaw {
    Uniform { min: f64, max: f64 },
    Triangular { min: f64, mode: f64, max: f64 },
    Degenerate(f64),
}

impl LambdaLaw {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            LambdaLaw::Uniform { min, max } | LambdaLaw::Triangular { min, max, .. } => (min, max),
            LambdaLaw::Degenerate(l) => (l, l),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support();
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eigenvalue support [{lo}, {hi}] must lie in [0, 1)"
            )));
        }
        if let LambdaLaw::Triangular { min, mode, max } = *self {
            if !(min < max && (min..=max).contains(&mode)) {
                return Err(Error::InvalidArgument("triangular law needs min <= mode <= max, min < max".into()));
            }
        }
        if let LambdaLaw::Uniform { min, max } = *self {
            if min == max {
                return Err(Error::InvalidArgument("uniform law needs min < max; use Degenerate".into()));
            }
        }
        Ok(())
    }

    /// Density; `None` for the point mass.
    pub fn pdf(&self, x: f64) -> Option<f64> {
        match *self {
            LambdaLaw::Uniform { min, max } => Some(if (min..=max).contains(&x) { 1.0 / (max - min) } else { 0.0 }),
            LambdaLaw::Triangular { min, mode, max } => Some(if x < min || x > max {
                0.0
            } else if x < mode {
                2.0 * (x - min) / ((max - min) * (mode - min))
            } else if x > mode {
                2.0 * (max - x) / ((max - min) * (max - mode))
            } else {
                2.0 / (max - min)
            }),
            LambdaLaw::Degenerate(_) => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LambdaLaw::Uniform { min, max } => rng.gen_range(min..max),
            LambdaLaw::Triangular { min, mode, max } => {
                let u: f64 = rng.gen();
                let cut = (mode - min) / (max - min);
                if u < cut {
                    min + (u * (max - min) * (mode - min)).sqrt()
                } else {
                    max - ((1.0 - u) * (max - min) * (max - mode)).sqrt()
                }
            }
            LambdaLaw::Degenerate(l) => l,
        }
    }

    /// `∫ p(λ)/(1 − λ²) dλ` for this law.
    pub fn inverse_gap_mean(&self) -> Result<f64> {
        self.validate()?;
        match *self {
            LambdaLaw::Uniform { min, max } => closed_form_norm(min, max, 1.0),
            LambdaLaw::Degenerate(l) => Ok(1.0 / (1.0 - l * l)),
            LambdaLaw::Triangular { min, max, .. } => {
                let law = *self;
                inverse_gap_integral(|x| law.pdf(x).unwrap_or(0.0), min, max)
            }
        }
    }
}

/// One Monte Carlo state-norm run.
#[derive(Debug, Clone, PartialEq)]
pub struct NormExperiment {
    /// State dimension.
    pub d: usize,
    /// Input dimension.
    pub m: usize,
    pub t_max: usize,
    pub trials: usize,
    pub lambda_law: LambdaLaw,
    /// Per-component variance of each row of `B`.
    pub b_var: f64,
    pub seed: u64,
}

impl NormExperiment {
    /// Row covariance `I/(2d)`.
    pub fn with_half_over_d(d: usize, m: usize, lambda_law: LambdaLaw, t_max: usize, trials: usize, seed: u64) -> Self {
        Self {
            d,
            m,
            t_max,
            trials,
            lambda_law,
            b_var: 1.0 / (2.0 * d as f64),
            seed,
        }
    }

    /// Row covariance `I/√d`.
    pub fn with_inv_sqrt_d(d: usize, m: usize, lambda_law: LambdaLaw, t_max: usize, trials: usize, seed: u64) -> Self {
        Self {
            b_var: 1.0 / (d as f64).sqrt(),
            ..Self::with_half_over_d(d, m, lambda_law, t_max, trials, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.t_max == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument("d, m, t_max and trials must be at least 1".into()));
        }
        if !(self.b_var >= 0.0 && self.b_var.is_finite()) {
            return Err(Error::InvalidArgument("b_var must be a finite non-negative variance".into()));
        }
        self.lambda_law.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct NormResult {
    /// Trial mean of `‖h_{t_max}‖²`.
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    /// Predicted stationary `E‖h_∞‖²`.
    pub closed_form: f64,
    pub ratio: f64,
    /// Trial mean of `‖B‖_F²`, i.e. `E‖Bx‖²` from the sampled matrices.
    pub e_bx2: f64,
    /// Simulated `E‖h_t‖²` for `t = 1..=t_max`.
    pub trace: Vec<TracePoint>,
    /// `E_x‖h_t‖²` given each trial's `(Λ, B)`, averaged over trials.
    pub expected_trace: Vec<f64>,
}

impl NormResult {
    /// `norm_trace.csv`: `t,mc_mean,mc_stderr,closed_form`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,mc_mean,mc_stderr,closed_form\n");
        for p in &self.trace {
            writeln!(out, "{},{:.12e},{:.12e},{:.12e}", p.t, p.mean, p.stderr, self.closed_form).unwrap();
        }
        out
    }

    /// `|mc − closed| / stderr`.
    pub fn z_score(&self) -> f64 {
        (self.mc_estimate - self.closed_form).abs() / self.mc_stderr
    }
}

struct TrialOutcome {
    norms_sq: Vec<f64>,
    expected: Vec<f64>,
    frob_sq: f64,
}

fn run_trial(spec: &NormExperiment, trial: usize) -> Result<TrialOutcome> {
    const CHUNK: usize = 256;
    let mut rng = rng::stream(spec.seed, trial as u64);
    let (d, m) = (spec.d, spec.m);
    let lambda: Vec<f64> = (0..d).map(|_| spec.lambda_law.sample(&mut rng)).collect();
    if let Some(l) = lambda.iter().find(|l| **l >= 1.0) {
        return Err(Error::InvalidArgument(format!("sampled eigenvalue {l} >= 1")));
    }
    let b = Matrix::randn(d, m, spec.b_var.sqrt(), &mut rng);
    let row_sq: Vec<f64> = (0..d).map(|i| b.row(i).iter().map(|v| v * v).sum()).collect();
    let frob_sq = row_sq.iter().sum();

    let mut h = vec![0.0; d];
    let mut norms_sq = Vec::with_capacity(spec.t_max);
    let mut xs = vec![0.0; CHUNK * m];
    let mut us = vec![0.0; CHUNK * d];
    let mut t = 0;
    while t < spec.t_max {
        let k = CHUNK.min(spec.t_max - t);
        for v in xs[..k * m].iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        // rows of `us` are (B x_t)ᵀ
        gemm(1.0, &xs[..k * m], (k, m), Op::N, &b.data, (d, m), Op::T, 0.0, &mut us[..k * d]);
        for step in 0..k {
            let u = &us[step * d..(step + 1) * d];
            let mut sq = 0.0;
            for i in 0..d {
                h[i] = lambda[i] * h[i] + u[i];
                sq += h[i] * h[i];
            }
            norms_sq.push(sq);
        }
        t += k;
    }

    let mut s = vec![0.0; d];
    let mut expected = Vec::with_capacity(spec.t_max);
    for _ in 0..spec.t_max {
        let mut total = 0.0;
        for i in 0..d {
            s[i] = lambda[i] * lambda[i] * s[i] + row_sq[i];
            total += s[i];
        }
        expected.push(total);
    }
    Ok(TrialOutcome { norms_sq, expected, frob_sq })
}

/// Monte Carlo estimate of `E‖h_t‖²` against the stationary prediction.
///
/// Trials run in parallel on independent seeded streams and are reduced in
/// trial order, so the result is identical for any thread count.
pub fn simulate_state_norm(spec: &NormExperiment) -> Result<NormResult> {
    spec.validate()?;
    let outcomes = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(spec, trial))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.trials as f64;
    let mut trace = Vec::with_capacity(spec.t_max);
    let mut expected_trace = vec![0.0; spec.t_max];
    for t in 0..spec.t_max {
        let mean = outcomes.iter().map(|o| o.norms_sq[t]).sum::<f64>() / n;
        let var = if spec.trials > 1 {
            outcomes.iter().map(|o| (o.norms_sq[t] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        trace.push(TracePoint {
            t: t + 1,
            mean,
            stderr: (var / n).sqrt(),
        });
    }
    for o in &outcomes {
        for (acc, v) in expected_trace.iter_mut().zip(&o.expected) {
            *acc += v;
        }
    }
    expected_trace.iter_mut().for_each(|v| *v /= n);
    let e_bx2 = outcomes.iter().map(|o| o.frob_sq).sum::<f64>() / n;
    let closed_form = e_bx2 * spec.lambda_law.inverse_gap_mean()?;
    let last = *trace.last().expect("t_max >= 1");
    Ok(NormResult {
        mc_estimate: last.mean,
        mc_stderr: last.stderr,
        closed_form,
        ratio: last.mean / closed_form,
        e_bx2,
        trace,
        expected_trace,
    })
}

/// Steps after which `λ_max^(2t)` falls below `tol`.
pub fn steady_state_steps(lambda_max: f64, tol: f64) -> usize {
    if lambda_max <= 0.0 {
        return 1;
    }
    (tol.ln() / (2.0 * lambda_max.ln())).ceil().max(1.0) as usize
}

fn check_support(lambda_min: f64, lambda_max: f64) -> Result<()> {
    if lambda_max >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "λ_max = {lambda_max} >= 1: the stationary norm diverges"
        )));
    }
    if !(0.0 <= lambda_min && lambda_min <= lambda_max) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= λ_min <= λ_max, got [{lambda_min}, {lambda_max}]"
        )));
    }
    Ok(())
}

/// Stationary `E‖h_∞‖²` for `λ ~ U[λ_min, λ_max]`.
///
/// Equals `e_bx2 · (artanh λ_max − artanh λ_min)/(λ_max − λ_min)`, with the
/// point-mass limit `e_bx2/(1 − λ²)` when the interval collapses.
pub fn closed_form_norm(lambda_min: f64, lambda_max: f64, e_bx2: f64) -> Result<f64> {
    check_support(lambda_min, lambda_max)?;
    if !(e_bx2 >= 0.0) {
        return Err(Error::InvalidArgument("E‖Bx‖² must be non-negative".into()));
    }
    let width = lambda_max - lambda_min;
    let coeff = if width == 0.0 {
        1.0 / (1.0 - lambda_max * lambda_max)
    } else if width < 1e-4 * (1.0 - lambda_max) {
        // Simpson on a sliver avoids the artanh cancellation.
        let f = |x: f64| 1.0 / (1.0 - x * x);
        (f(lambda_min) + 4.0 * f(0.5 * (lambda_min + lambda_max)) + f(lambda_max)) / 6.0
    } else {
        (lambda_max.atanh() - lambda_min.atanh()) / width
    };
    Ok(coeff * e_bx2)
}

/// Uniform mean of `λ/(1 − λ²)` on `[λ_min, λ_max]`:
/// `log((1 − λ_min²)/(1 − λ_max²)) / (2(λ_max − λ_min))`.
///
/// This is the coefficient the Mamba / Mamba2 growth rates are built from
/// ([`rate_mamba`] is `Δ` times its value on `[0, λ]`, [`rate_mamba2`] is `Δ`
/// times its point limit). It is *not* the stationary norm; see
/// [`closed_form_norm`].
pub fn rate_coefficient(lambda_min: f64, lambda_max: f64) -> Result<f64> {
    check_support(lambda_min, lambda_max)?;
    let width = lambda_max - lambda_min;
    if width == 0.0 {
        return Ok(lambda_max / (1.0 - lambda_max * lambda_max));
    }
    let num = (-lambda_min * lambda_min).ln_1p() - (-lambda_max * lambda_max).ln_1p();
    Ok(num / (2.0 * width))
}

/// `∫_lo^hi p(λ)/(1 − λ²) dλ` without any normalization check.
pub fn inverse_gap_integral<P: Fn(f64) -> f64>(p: P, lo: f64, hi: f64) -> Result<f64> {
    check_support(lo, hi)?;
    Ok(integrate(|x| p(x) / ((1.0 - x) * (1.0 + x)), lo, hi, 1e-11, 0.0)?.value)
}

/// `e_bx2 · ∫ p(λ)/(1 − λ²) dλ` for a density `p` supported on `[λ_min, λ_max]`.
pub fn general_integral<P: Fn(f64) -> f64>(p: P, lambda_min: f64, lambda_max: f64, e_bx2: f64) -> Result<f64> {
    if lambda_max >= 1.0 {
        return Err(Error::InvalidArgument(
            "support touches 1: ∫ p/(1 − λ²) is not integrable there".into(),
        ));
    }
    check_support(lambda_min, lambda_max)?;
    let mass = integrate(&p, lambda_min, lambda_max, 1e-12, 1e-14)?.value;
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("density integrates to {mass}, not 1")));
    }
    Ok(e_bx2 * inverse_gap_integral(p, lambda_min, lambda_max)?)
}

/// Mean and standard error of `e_bx2/(1 − λ²)` over `n` draws of `λ`.
pub fn lambda_sampled_estimate(law: &LambdaLaw, e_bx2: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    law.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let l = law.sample(&mut rng);
        let v = e_bx2 / (1.0 - l * l);
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq - nf * mean * mean) / (nf - 1.0);
    Ok((mean, (var.max(0.0) / nf).sqrt()))
}

fn check_rate_args(delta: f64, lambda: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("Δ must be positive, got {delta}")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("λ must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

/// `(Δ / 2λ) · ln(1/(1 − λ²))`.
pub fn rate_mamba(delta: f64, lambda: f64) -> Result<f64> {
    check_rate_args(delta, lambda)?;
    Ok(delta / (2.0 * lambda) * -(-lambda * lambda).ln_1p())
}

/// `Δ λ / (1 − λ²)`.
pub fn rate_mamba2(delta: f64, lambda: f64) -> Result<f64> {
    check_rate_args(delta, lambda)?;
    Ok(delta * lambda / (1.0 - lambda * lambda))
}

/// Largest singular value by power iteration on `BᵀB`.
pub fn spectral_norm(b: &Matrix) -> f64 {
    let n = b.cols;
    if n == 0 || b.rows == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_034).fract()).collect();
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let nv = norm2(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let bv = b.matvec(&v);
        let next = norm2(&bv);
        v = b.matvec_t(&bv);
        if (next - sigma).abs() <= 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Report {
    pub bound: f64,
    pub max_observed: f64,
    pub violations: usize,
    pub samples: usize,
}

/// `σ_B · σ_x · √d`.
pub fn lemma1_bound(sigma_b: f64, sigma_x: f64, d: usize) -> f64 {
    sigma_b * sigma_x * (d as f64).sqrt()
}

/// Sample Gaussian `B` rescaled to spectral norm `σ_B` and `x` in the box
/// `|x_i| ≤ σ_x` (uniform interior points and random corners), and compare
/// `‖Bx‖₂` with [`lemma1_bound`].
pub fn lemma1_check(sigma_b: f64, sigma_x: f64, d: usize, samples: usize, seed: u64) -> Result<Lemma1Report> {
    if d == 0 || sigma_b < 0.0 || sigma_x < 0.0 {
        return Err(Error::InvalidArgument("lemma1_check needs d >= 1 and non-negative scales".into()));
    }
    const PER_MATRIX: usize = 1000;
    let bound = lemma1_bound(sigma_b, sigma_x, d);
    let n_mats = samples.div_ceil(PER_MATRIX).max(1);
    let mut max_observed = 0.0f64;
    let mut violations = 0;
    let mut done = 0;
    for k in 0..n_mats {
        let mut rng = rng::stream(seed, k as u64);
        let mut b = Matrix::randn(d, d, 1.0, &mut rng);
        let norm = spectral_norm(&b);
        b.data.iter_mut().for_each(|v| *v *= sigma_b / norm);
        let count = PER_MATRIX.min(samples - done);
        let mut xs = vec![0.0; count * d];
        for (j, x) in xs.chunks_mut(d).enumerate() {
            for xi in x.iter_mut() {
                *xi = if j % 2 == 0 {
                    rng.gen_range(-sigma_x..=sigma_x)
                } else if rng.gen::<bool>() {
                    sigma_x
                } else {
                    -sigma_x
                };
            }
        }
        let mut bx = vec![0.0; count * d];
        gemm(1.0, &xs, (count, d), Op::N, &b.data, (d, d), Op::T, 0.0, &mut bx);
        for row in bx.chunks(d) {
            let v = norm2(row);
            max_observed = max_observed.max(v);
            // tolerance for rounding in the rescaled spectral norm only
            if v > bound * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        done += count;
    }
    Ok(Lemma1Report {
        bound,
        max_observed,
        violations,
        samples,
    })
}

/// Least-squares fit of endpoint asymptotics.
#[derive(Debug, Clone)]
pub struct AsymptoteFit {
    pub slope: f64,
    pub predicted: f64,
    pub rel_err: f64,
    /// `(abscissa, integral)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Divergence as `λ_max → 1⁻`: fit `I(λ_max)` against `−ln(1 − λ_max)` for a
/// density `p` on `[lambda_min, 1)` and compare the slope with `p(1)/2`.
pub fn asymptote_fit<P: Fn(f64) -> f64>(p: P, p_at_one: f64, lambda_min: f64, sweep: &[f64]) -> Result<AsymptoteFit> {
    if sweep.len() < 2 {
        return Err(Error::InvalidArgument("sweep needs at least two points".into()));
    }
    let points = sweep
        .iter()
        .map(|&hi| Ok((-(1.0 - hi).ln(), inverse_gap_integral(&p, lambda_min, hi)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let predicted = p_at_one / 2.0;
    Ok(AsymptoteFit {
        slope,
        predicted,
        rel_err: (slope - predicted).abs() / predicted,
        points,
    })
}

/// Vanishing as `λ_max → 0⁺`: fit `I(0, λ_max) = k · λ_max` through the origin
/// and compare `k` with `p(0)`.
pub fn small_lambda_fit<P: Fn(f64) -> f64>(p: P, p_at_zero: f64, sweep: &[f64]) -> Result<AsymptoteFit> {
    if sweep.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one point".into()));
    }
    let points = sweep
        .iter()
        .map(|&hi| Ok((hi, inverse_gap_integral(&p, 0.0, hi)?)))
        .collect::<Result<Vec<_>>>()?;
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let slope = sxy / sxx;
    Ok(AsymptoteFit {
        slope,
        predicted: p_at_zero,
        rel_err: (slope - p_at_zero).abs() / p_at_zero,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_norm(0.0, 0.0, 3.5).unwrap(), 3.5);
        let deg = closed_form_norm(0.9, 0.9, 2.0).unwrap();
        assert!((deg - 2.0 / 0.19).abs() < 1e-12);
        let v = closed_form_norm(0.5, 0.9, 1.0).unwrap();
        let quad = inverse_gap_integral(|_| 1.0 / 0.4, 0.5, 0.9).unwrap();
        assert!((v - quad).abs() < 1e-12 * v);
        assert!((v - 2.307_283_363_1).abs() < 1e-9);
        assert!(closed_form_norm(0.5, 1.0, 1.0).is_err());
        // the sliver branch joins the artanh branch continuously
        let a = closed_form_norm(0.3, 0.3 + 1e-7, 1.0).unwrap();
        assert!((a - 1.0 / (1.0 - 0.09)).abs() < 1e-6);
    }

    #[test]
    fn rate_coefficient_examples() {
        let v = rate_coefficient(0.5, 0.9).unwrap();
        assert!((v - 1.25 * (0.75f64 / 0.19).ln()).abs() < 1e-14);
        assert!((v - 1.7163).abs() < 1e-4);
        let quad = inverse_gap_integral(|x| x / 0.4, 0.5, 0.9).unwrap();
        assert!((v - quad).abs() < 1e-10);
    }

    #[test]
    fn rates() {
        let m1 = rate_mamba(0.1, 0.9).unwrap();
        assert!((m1 - 0.1 / 1.8 * (1.0f64 / 0.19).ln()).abs() < 1e-15);
        assert!((m1 - 0.09226).abs() < 1e-5);
        assert!((m1 - 0.1 * rate_coefficient(0.0, 0.9).unwrap()).abs() < 1e-15);
        let m2 = rate_mamba2(0.1, 0.9).unwrap();
        assert!((m2 - 0.47368).abs() < 1e-5);
        // point limit of the interval coefficient
        let narrow = rate_coefficient(0.9, 0.9 + 1e-7).unwrap();
        assert!((0.1 * narrow - m2).abs() < 1e-5);
        assert!(rate_mamba(0.1, 1.0).is_err());
        assert!(rate_mamba2(0.1, 0.0).is_err());
        assert!(rate_mamba(0.0, 0.5).is_err());

        let grid: Vec<f64> = (1..1000).map(|k| k as f64 / 1000.0).collect();
        for f in [rate_mamba, rate_mamba2] {
            let vals: Vec<f64> = grid.iter().map(|l| f(0.1, *l).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] > w[0]));
            assert!(vals[0] < 1e-3);
            assert!(f(0.1, 1.0 - 1e-12).unwrap() > 1.0);
        }
    }

    #[test]
    fn general_integral_matches_uniform_closed_form() {
        let got = general_integral(|_| 1.0 / 0.4, 0.5, 0.9, 3.0).unwrap();
        let want = closed_form_norm(0.5, 0.9, 3.0).unwrap();
        assert!((got - want).abs() < 1e-8 * want);
        let narrow = general_integral(|_| 1.0 / 1e-6, 0.5, 0.5 + 1e-6, 1.0).unwrap();
        assert!((narrow - 1.0 / 0.75).abs() < 1e-5);
    }

    #[test]
    fn general_integral_errors() {
        assert!(general_integral(|_| 1.0, 0.0, 1.0, 1.0).is_err());
        assert!(general_integral(|_| 2.0, 0.0, 0.9, 1.0).is_err());
    }

    #[test]
    fn triangular_matches_lambda_sampling() {
        let law = LambdaLaw::Triangular { min: 0.2, mode: 0.5, max: 0.8 };
        let q = general_integral(|x| law.pdf(x).unwrap(), 0.2, 0.8, 1.0).unwrap();
        let (mean, se) = lambda_sampled_estimate(&law, 1.0, 200_000, 5).unwrap();
        assert!((mean - q).abs() < 3.0 * se, "{mean} vs {q} (se {se})");
    }

    #[test]
    fn memoryless_and_first_step() {
        let spec = NormExperiment::with_half_over_d(16, 8, LambdaLaw::Degenerate(0.0), 6, 4, 9);
        let r = simulate_state_norm(&spec).unwrap();
        for v in &r.expected_trace {
            assert!((v - r.e_bx2).abs() < 1e-12 * r.e_bx2);
        }
        let spec = NormExperiment::with_half_over_d(16, 8, LambdaLaw::Uniform { min: 0.2, max: 0.9 }, 40, 4, 9);
        let r = simulate_state_norm(&spec).unwrap();
        assert!((r.expected_trace[0] - r.e_bx2).abs() < 1e-12 * r.e_bx2);
        assert!(r.expected_trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(r.trace.len(), 40);
    }

    #[test]
    fn small_monte_carlo_agrees() {
        let spec = NormExperiment::with_half_over_d(64, 32, LambdaLaw::Uniform { min: 0.5, max: 0.9 }, 200, 64, 1);
        let r = simulate_state_norm(&spec).unwrap();
        assert!(r.z_score() < 3.0, "z = {}", r.z_score());
        let again = simulate_state_norm(&spec).unwrap();
        assert_eq!(r.mc_estimate.to_bits(), again.mc_estimate.to_bits());
        assert!(r.trace_csv().starts_with("t,mc_mean,mc_stderr,closed_form\n"));
    }

    #[test]
    fn inverse_sqrt_preset() {
        let spec = NormExperiment::with_inv_sqrt_d(16, 16, LambdaLaw::Uniform { min: 0.1, max: 0.5 }, 10, 2, 0);
        assert!((spec.b_var - 0.25).abs() < 1e-15);
        assert!(NormExperiment { trials: 0, ..spec.clone() }.validate().is_err());
        let bad = NormExperiment {
            lambda_law: LambdaLaw::Uniform { min: 0.5, max: 1.0 },
            ..spec
        };
        assert!(simulate_state_norm(&bad).is_err());
    }

    #[test]
    fn steady_state_cutoff() {
        let t = steady_state_steps(0.9, 1e-6);
        assert!(0.9f64.powi(2 * t as i32) < 1e-6);
        assert!(0.9f64.powi(2 * (t as i32 - 1)) >= 1e-6);
    }

    #[test]
    fn input_bound_equality_and_zero() {
        let id = Matrix::identity(4);
        assert!((spectral_norm(&id) - 1.0).abs() < 1e-14);
        let bx = norm2(&id.matvec(&[1.0; 4]));
        assert!((bx - lemma1_bound(1.0, 1.0, 4)).abs() < 1e-15);
        assert_eq!(lemma1_bound(1.0, 1.0, 4), 2.0);
        let r = lemma1_check(1.0, 0.0, 8, 50, 1).unwrap();
        assert_eq!((r.bound, r.max_observed, r.violations), (0.0, 0.0, 0));
        let r = lemma1_check(2.0, 0.5, 64, 1000, 2).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_observed <= r.bound);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let mut m = Matrix::zeros(3, 3);
        m.set(0, 0, 0.5);
        m.set(1, 1, -3.0);
        m.set(2, 2, 2.0);
        assert!((spectral_norm(&m) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_asymptotics() {
        let sweep: Vec<f64> = (3..=6).map(|k| 1.0 - 10f64.powi(-k)).collect();
        let fit = asymptote_fit(|_| 1.0, 1.0, 0.0, &sweep).unwrap();
        assert!(fit.rel_err < 0.1, "{fit:?}");
        let fit = asymptote_fit(|x| 2.0 * x, 2.0, 0.0, &sweep).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.1);
        let small: Vec<f64> = (0..5).map(|k| 1e-3 * 2f64.powi(k)).collect();
        let fit = small_lambda_fit(|_| 1.0, 1.0, &small).unwrap();
        assert!(fit.rel_err < 0.05);
        let fit = small_lambda_fit(|x| 2.0 * (1.0 - x), 2.0, &small).unwrap();
        assert!(fit.rel_err < 0.05);
    }
}
