//! Discretized selective state-space recurrence.
//!
//! One layer holds `d_model` independent scan channels. Channel `c` carries a
//! `d_state` hidden vector `h[c]` driven by the scalar input `x_t[c]`:
//!
//! ```text
//! delta_t = softplus(W_delta x_t + b_delta) * delta_scale
//! a_bar   = exp(-delta_t * a_scale * a)
//! h_t     = a_bar * h_{t-1} + delta_t * B_t * x_t[c]      B_t = W_B x_t
//! y_t[c]  = <C_t, h_t[c]>                                  C_t = W_C x_t
//! ```
//!
//! `B_t`/`C_t` are shared across channels. For [`Variant::Mamba`] every
//! `(channel, state)` entry has its own `a` and every channel its own `delta`.
//! For [`Variant::Mamba2`] channels are split into heads; each head shares one
//! `a` and one `delta`. The input map uses the simplified Euler form
//! `B_bar = delta * B`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, max_rel_diff, softplus, softplus_inv, Matrix};

/// Largest sequence length [`materialize_mixing_matrix`] will build.
pub const MAX_MATERIALIZE_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    /// Per-channel diagonal `A`.
    Mamba,
    /// Scalar-times-identity `A` per head.
    Mamba2 { heads: usize },
}

/// Initialization ranges for a fresh layer.
#[derive(Debug, Clone, Copy)]
pub struct InitRanges {
    pub a_min: f64,
    pub a_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            a_min: 0.05,
            a_max: 8.0,
            delta_min: 0.01,
            delta_max: 0.1,
        }
    }
}

/// Continuous parameters of one selective SSM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmLayerParams {
    pub variant: Variant,
    pub d_model: usize,
    pub d_state: usize,
    /// Positive diagonal of `A`. Mamba: `d_model * d_state` row-major by
    /// channel; Mamba2: one entry per head.
    pub a_diag: Vec<f64>,
    /// `groups × d_model` step-size projection.
    pub w_delta: Matrix,
    pub b_delta: Vec<f64>,
    /// `d_state × d_model`.
    pub w_b: Matrix,
    /// `d_state × d_model`.
    pub w_c: Matrix,
}

impl SsmLayerParams {
    /// Fresh layer: `a` geometrically spaced over `[a_min, a_max]` (across
    /// state entries for Mamba, across heads for Mamba2), step-size bias set so
    /// `softplus(b_delta)` is log-uniform in `[delta_min, delta_max]`.
    pub fn init<R: Rng + ?Sized>(
        variant: Variant,
        d_model: usize,
        d_state: usize,
        ranges: InitRanges,
        rng: &mut R,
    ) -> Result<Self> {
        if d_model == 0 || d_state == 0 {
            return Err(Error::InvalidArgument("d_model and d_state must be positive".into()));
        }
        let geometric = |n: usize, k: usize| -> f64 {
            if n == 1 {
                (ranges.a_min * ranges.a_max).sqrt()
            } else {
                let f = k as f64 / (n - 1) as f64;
                ranges.a_min * (ranges.a_max / ranges.a_min).powf(f)
            }
        };
        let a_diag = match variant {
            Variant::Mamba => (0..d_model)
                .flat_map(|_| 0..d_state)
                .map(|i| geometric(d_state, i))
                .collect(),
            Variant::Mamba2 { heads } => {
                if heads == 0 || !d_model.is_multiple_of(heads) {
                    return Err(Error::InvalidArgument(format!(
                        "heads ({heads}) must divide d_model ({d_model})"
                    )));
                }
                (0..heads).map(|k| geometric(heads, k)).collect()
            }
        };
        let groups = match variant {
            Variant::Mamba => d_model,
            Variant::Mamba2 { heads } => heads,
        };
        let proj_std = 1.0 / (d_model as f64).sqrt();
        let w_delta = Matrix::randn(groups, d_model, 0.5 * proj_std, rng);
        let (lo, hi) = (ranges.delta_min.ln(), ranges.delta_max.ln());
        let b_delta = (0..groups)
            .map(|_| softplus_inv(rng.gen_range(lo..=hi).exp()))
            .collect();
        let w_b = Matrix::randn(d_state, d_model, proj_std, rng);
        let w_c = Matrix::randn(d_state, d_model, proj_std, rng);
        let p = Self {
            variant,
            d_model,
            d_state,
            a_diag,
            w_delta,
            b_delta,
            w_b,
            w_c,
        };
        p.validate()?;
        Ok(p)
    }

    /// Number of independent step-size / scaling units.
    pub fn groups(&self) -> usize {
        match self.variant {
            Variant::Mamba => self.d_model,
            Variant::Mamba2 { heads } => heads,
        }
    }

    #[inline]
    pub fn group_of(&self, channel: usize) -> usize {
        match self.variant {
            Variant::Mamba => channel,
            Variant::Mamba2 { heads } => channel / (self.d_model / heads),
        }
    }

    /// Index into `a_diag` for state entry `i` of `channel`.
    #[inline]
    pub fn a_index(&self, channel: usize, i: usize) -> usize {
        match self.variant {
            Variant::Mamba => channel * self.d_state + i,
            Variant::Mamba2 { .. } => self.group_of(channel),
        }
    }

    #[inline]
    pub fn a(&self, channel: usize, i: usize) -> f64 {
        self.a_diag[self.a_index(channel, i)]
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.groups();
        if let Variant::Mamba2 { heads } = self.variant {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(Error::InvalidArgument(format!(
                    "heads ({heads}) must divide d_model ({})",
                    self.d_model
                )));
            }
        }
        let a_len = match self.variant {
            Variant::Mamba => self.d_model * self.d_state,
            Variant::Mamba2 { heads } => heads,
        };
        if self.a_diag.len() != a_len {
            return Err(Error::InvalidArgument(format!(
                "a_diag has {} entries, expected {a_len}",
                self.a_diag.len()
            )));
        }
        if let Some(a) = self.a_diag.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument(format!("a_diag entries must be positive, found {a}")));
        }
        let shape_ok = self.w_delta.rows == groups
            && self.w_delta.cols == self.d_model
            && self.b_delta.len() == groups
            && self.w_b.rows == self.d_state
            && self.w_b.cols == self.d_model
            && self.w_c.rows == self.d_state
            && self.w_c.cols == self.d_model;
        if !shape_ok {
            return Err(Error::InvalidArgument("projection shapes inconsistent with d_model/d_state".into()));
        }
        Ok(())
    }
}

/// Per-group positive multipliers applied inside [`discretize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scales {
    pub a: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Scales {
    pub fn identity(groups: usize) -> Self {
        Self {
            a: vec![1.0; groups],
            delta: vec![1.0; groups],
        }
    }

    pub fn validate(&self, groups: usize) -> Result<()> {
        if self.a.len() != groups || self.delta.len() != groups {
            return Err(Error::InvalidArgument(format!(
                "scales must have {groups} entries (a: {}, delta: {})",
                self.a.len(),
                self.delta.len()
            )));
        }
        if self.a.iter().chain(&self.delta).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("scales must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Discrete parameters for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedStep {
    /// Step size per group.
    pub delta: Vec<f64>,
    /// `d_model × d_state`, entries in (0, 1).
    pub a_bar: Vec<f64>,
    /// `d_model × d_state`: `delta[group(c)] * B_t[i]`.
    pub b_bar: Vec<f64>,
    /// `C_t`, length `d_state`.
    pub c: Vec<f64>,
}

pub fn discretize(params: &SsmLayerParams, x_t: &[f64], scales: &Scales) -> Result<DiscretizedStep> {
    let (dm, ds) = (params.d_model, params.d_state);
    if x_t.len() != dm {
        return Err(Error::InvalidArgument(format!("input has {} entries, expected {dm}", x_t.len())));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretize input".into()));
    }
    scales.validate(params.groups())?;
    let z = params.w_delta.matvec(x_t);
    let delta: Vec<f64> = z
        .iter()
        .zip(&params.b_delta)
        .zip(&scales.delta)
        .map(|((z, b), s)| softplus(z + b) * s)
        .collect();
    let b = params.w_b.matvec(x_t);
    let c = params.w_c.matvec(x_t);
    let mut a_bar = vec![0.0; dm * ds];
    let mut b_bar = vec![0.0; dm * ds];
    for ch in 0..dm {
        let g = params.group_of(ch);
        for i in 0..ds {
            a_bar[ch * ds + i] = (-delta[g] * (scales.a[g] * params.a(ch, i))).exp();
            b_bar[ch * ds + i] = delta[g] * b[i];
        }
    }
    Ok(DiscretizedStep { delta, a_bar, b_bar, c })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanState {
    /// `d_model × d_state`.
    pub h: Vec<f64>,
    /// Number of steps consumed.
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct ScanOutput {
    /// One `d_model` vector per step.
    pub outputs: Vec<Vec<f64>>,
    pub final_state: ScanState,
    /// `‖h_t‖₂` over the whole layer state after each step.
    pub state_norm_trace: Vec<f64>,
}

/// Sequential recurrence over `inputs`, starting from `h0` (zeros if `None`).
pub fn selective_scan(
    params: &SsmLayerParams,
    inputs: &[Vec<f64>],
    h0: Option<&[f64]>,
    scales: &Scales,
) -> Result<ScanOutput> {
    params.validate()?;
    let (dm, ds) = (params.d_model, params.d_state);
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("scan needs at least one input".into()));
    }
    let mut h = match h0 {
        Some(h0) if h0.len() != dm * ds => {
            return Err(Error::InvalidArgument("h0 has the wrong length".into()));
        }
        Some(h0) if h0.iter().any(|v| !v.is_finite()) => {
            return Err(Error::NonFinite("initial state".into()));
        }
        Some(h0) => h0.to_vec(),
        None => vec![0.0; dm * ds],
    };
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut trace = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let step = discretize(params, x, scales)?;
        let mut y = vec![0.0; dm];
        for ch in 0..dm {
            let hc = &mut h[ch * ds..(ch + 1) * ds];
            for i in 0..ds {
                hc[i] = step.a_bar[ch * ds + i] * hc[i] + step.b_bar[ch * ds + i] * x[ch];
            }
            y[ch] = dot(&step.c, hc);
        }
        let sq: f64 = h.iter().map(|v| v * v).sum();
        if !sq.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::StateOverflow { layer: 0, step: t });
        }
        trace.push(sq.sqrt());
        outputs.push(y);
    }
    Ok(ScanOutput {
        outputs,
        final_state: ScanState { h, t: inputs.len() },
        state_norm_trace: trace,
    })
}

/// Explicit lower-triangular mixing matrices, one per channel.
#[derive(Debug, Clone)]
pub struct MixingMatrices {
    /// `per_channel[c][i][j] = C_i · (∏_{t=j+1..i} Ā_t[c]) · B̄_j[c]`.
    pub per_channel: Vec<Matrix>,
    /// `Y = M · X`, one `d_model` vector per step.
    pub outputs: Vec<Vec<f64>>,
}

pub fn materialize_mixing_matrix(
    params: &SsmLayerParams,
    inputs: &[Vec<f64>],
    scales: &Scales,
) -> Result<MixingMatrices> {
    params.validate()?;
    let len = inputs.len();
    if len == 0 {
        return Err(Error::InvalidArgument("need at least one input".into()));
    }
    if len > MAX_MATERIALIZE_LEN {
        return Err(Error::TooLong {
            len,
            max: MAX_MATERIALIZE_LEN,
        });
    }
    let (dm, ds) = (params.d_model, params.d_state);
    let steps = inputs
        .iter()
        .map(|x| discretize(params, x, scales))
        .collect::<Result<Vec<_>>>()?;
    let mut per_channel = Vec::with_capacity(dm);
    let mut outputs = vec![vec![0.0; dm]; len];
    let mut prod = vec![0.0; ds];
    for ch in 0..dm {
        let mut m = Matrix::zeros(len, len);
        for j in 0..len {
            // prod = ∏_{t=j+1..i} Ā_t, grown one row at a time.
            prod.iter_mut().for_each(|p| *p = 1.0);
            for i in j..len {
                if i > j {
                    for (k, p) in prod.iter_mut().enumerate() {
                        *p *= steps[i].a_bar[ch * ds + k];
                    }
                }
                let bj = &steps[j].b_bar[ch * ds..(ch + 1) * ds];
                let v: f64 = (0..ds).map(|k| steps[i].c[k] * prod[k] * bj[k]).sum();
                m.set(i, j, v);
            }
        }
        for (i, out) in outputs.iter_mut().enumerate() {
            out[ch] = (0..=i).map(|j| m.get(i, j) * inputs[j][ch]).sum();
        }
        per_channel.push(m);
    }
    Ok(MixingMatrices { per_channel, outputs })
}

/// Stepwise product versus sum-form of the transition over a run of steps.
#[derive(Debug, Clone)]
pub struct CumulativeTransition {
    /// `∏_t exp(-a ⊙ Δ_t)` accumulated step by step.
    pub stepwise: Vec<f64>,
    /// `exp(-a ⊙ Σ_t Δ_t)`.
    pub summed: Vec<f64>,
    /// Elementwise max of `|stepwise - summed| / summed`.
    pub max_rel_diff: f64,
}

pub fn cumulative_transition(a_diag: &[f64], deltas: &[f64]) -> Result<CumulativeTransition> {
    if a_diag.iter().chain(deltas).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cumulative_transition input".into()));
    }
    if deltas.iter().any(|d| *d <= 0.0) {
        return Err(Error::InvalidArgument("deltas must be positive".into()));
    }
    let mut stepwise = vec![1.0; a_diag.len()];
    for d in deltas {
        for (p, a) in stepwise.iter_mut().zip(a_diag) {
            *p *= (-a * d).exp();
        }
    }
    // Compensated sum keeps the reference path accurate over long runs.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for d in deltas {
        let y = d - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let summed: Vec<f64> = a_diag.iter().map(|a| (-a * sum).exp()).collect();
    let max_rel = stepwise
        .iter()
        .zip(&summed)
        .map(|(s, r)| if *r == 0.0 { (s - r).abs() } else { ((s - r) / r).abs() })
        .fold(0.0, f64::max);
    Ok(CumulativeTransition {
        stepwise,
        summed,
        max_rel_diff: max_rel,
    })
}

/// Max relative disagreement between the scan and the mixing-matrix route.
pub fn scan_matrix_discrepancy(params: &SsmLayerParams, inputs: &[Vec<f64>], scales: &Scales) -> Result<f64> {
    let scan = selective_scan(params, inputs, None, scales)?;
    let mix = materialize_mixing_matrix(params, inputs, scales)?;
    let a: Vec<f64> = scan.outputs.concat();
    let b: Vec<f64> = mix.outputs.concat();
    Ok(max_rel_diff(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_layer(variant: Variant, dm: usize, ds: usize, seed: u64) -> SsmLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SsmLayerParams::init(variant, dm, ds, InitRanges::default(), &mut rng).unwrap();
        for a in p.a_diag.iter_mut() {
            *a = rng.gen_range(0.05..3.0);
        }
        p
    }

    fn random_inputs(len: usize, dm: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| (0..dm).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Layer with zero projections so that softplus(b_delta) fixes delta.
    fn fixed_delta_layer(a: Vec<f64>, delta: f64) -> SsmLayerParams {
        let ds = a.len();
        SsmLayerParams {
            variant: Variant::Mamba,
            d_model: 1,
            d_state: ds,
            a_diag: a,
            w_delta: Matrix::zeros(1, 1),
            b_delta: vec![softplus_inv(delta)],
            w_b: Matrix::from_vec(ds, 1, vec![1.0; ds]),
            w_c: Matrix::from_vec(ds, 1, vec![1.0; ds]),
        }
    }

    #[test]
    fn discretize_half_step() {
        let p = fixed_delta_layer(vec![1.0], 0.5);
        let s = discretize(&p, &[0.0], &Scales::identity(1)).unwrap();
        assert!((s.delta[0] - 0.5).abs() < 1e-12);
        assert!((s.a_bar[0] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((s.a_bar[0] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn identity_scales_are_bitwise_neutral() {
        let p = random_layer(Variant::Mamba, 4, 3, 1);
        let x = random_inputs(1, 4, 2).pop().unwrap();
        let a = discretize(&p, &x, &Scales::identity(4)).unwrap();
        // The hook-free reference: the same formulas with no multiplier at all.
        let z = p.w_delta.matvec(&x);
        for ch in 0..4 {
            let d = softplus(z[ch] + p.b_delta[ch]);
            assert_eq!(a.delta[ch].to_bits(), d.to_bits());
            for i in 0..3 {
                let want = (-d * p.a(ch, i)).exp();
                assert_eq!(a.a_bar[ch * 3 + i].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn scaling_a_matches_halved_rate() {
        let p = fixed_delta_layer(vec![2.0], 0.3);
        let scales = Scales {
            a: vec![0.5],
            delta: vec![1.0],
        };
        let s = discretize(&p, &[0.0], &scales).unwrap();
        assert!((s.a_bar[0] - (-0.3f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn discretize_rejects_non_finite_input() {
        let p = random_layer(Variant::Mamba, 2, 2, 4);
        assert!(matches!(
            discretize(&p, &[f64::NAN, 0.0], &Scales::identity(2)),
            Err(Error::NonFinite(_))
        ));
        let bad = Scales {
            a: vec![1.0, 0.0],
            delta: vec![1.0, 1.0],
        };
        assert!(discretize(&p, &[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn single_step_unrolls() {
        let p = random_layer(Variant::Mamba, 3, 4, 5);
        let x = random_inputs(1, 3, 6);
        let out = selective_scan(&p, &x, None, &Scales::identity(3)).unwrap();
        let step = discretize(&p, &x[0], &Scales::identity(3)).unwrap();
        for ch in 0..3 {
            let h: Vec<f64> = (0..4).map(|i| step.b_bar[ch * 4 + i] * x[0][ch]).collect();
            assert!((out.outputs[0][ch] - dot(&step.c, &h)).abs() < 1e-14);
        }
        assert_eq!(out.final_state.t, 1);
    }

    #[test]
    fn huge_a_makes_scan_memoryless() {
        let mut p = random_layer(Variant::Mamba, 2, 3, 7);
        p.a_diag.iter_mut().for_each(|a| *a = 1e6);
        let x = random_inputs(6, 2, 8);
        let full = selective_scan(&p, &x, None, &Scales::identity(2)).unwrap();
        for t in 0..6 {
            let alone = selective_scan(&p, &x[t..t + 1], None, &Scales::identity(2)).unwrap();
            for ch in 0..2 {
                assert!((full.outputs[t][ch] - alone.outputs[0][ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scan_matches_mixing_matrix_on_random_instance() {
        let p = random_layer(Variant::Mamba, 4, 4, 11);
        let x = random_inputs(8, 4, 12);
        assert!(scan_matrix_discrepancy(&p, &x, &Scales::identity(4)).unwrap() < 1e-10);
    }

    #[test]
    fn mixing_matrix_edge_cases() {
        let p = random_layer(Variant::Mamba2 { heads: 2 }, 4, 3, 13);
        let x = random_inputs(5, 4, 14);
        let mix = materialize_mixing_matrix(&p, &x, &Scales::identity(2)).unwrap();
        for (ch, m) in mix.per_channel.iter().enumerate() {
            for i in 0..5 {
                let step = discretize(&p, &x[i], &Scales::identity(2)).unwrap();
                let diag = dot(&step.c, &step.b_bar[ch * 3..ch * 3 + 3]);
                assert!((m.get(i, i) - diag).abs() < 1e-14);
                for j in i + 1..5 {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        let one = materialize_mixing_matrix(&p, &x[..1], &Scales::identity(2)).unwrap();
        assert_eq!((one.per_channel[0].rows, one.per_channel[0].cols), (1, 1));
    }

    #[test]
    fn mixing_matrix_length_guard() {
        let p = random_layer(Variant::Mamba, 1, 1, 15);
        let x = vec![vec![0.0]; MAX_MATERIALIZE_LEN + 1];
        assert!(matches!(
            materialize_mixing_matrix(&p, &x, &Scales::identity(1)),
            Err(Error::TooLong { .. })
        ));
    }

    #[test]
    fn overflow_reports_step() {
        let mut p = fixed_delta_layer(vec![1e-9], 1.0);
        p.w_b = Matrix::from_vec(1, 1, vec![1e300]);
        let x = vec![vec![1e10]; 4];
        let err = selective_scan(&p, &x, None, &Scales::identity(1)).unwrap_err();
        assert!(matches!(err, Error::StateOverflow { step: 0, .. }));
    }

    #[test]
    fn cumulative_transition_examples() {
        let a = [0.3, 1.0, 2.5];
        let ct = cumulative_transition(&a, &[0.2; 7]).unwrap();
        for (k, av) in a.iter().enumerate() {
            assert!((ct.summed[k] - (-av * 7.0 * 0.2).exp()).abs() < 1e-14);
        }
        let single = cumulative_transition(&a, &[0.4]).unwrap();
        for (k, av) in a.iter().enumerate() {
            assert_eq!(single.stepwise[k], (-av * 0.4).exp());
        }
        assert!(cumulative_transition(&a, &[0.1, -0.1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let deltas: Vec<f64> = (0..1000).map(|_| rng.gen_range(1e-12..0.1)).collect();
        let ct = cumulative_transition(&[1.0], &deltas).unwrap();
        assert!(ct.max_rel_diff < 1e-9, "{}", ct.max_rel_diff);
    }

    #[test]
    fn init_spreads_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmLayerParams::init(Variant::Mamba2 { heads: 4 }, 8, 4, InitRanges::default(), &mut rng).unwrap();
        assert_eq!(p.a_diag.len(), 4);
        assert!(p.a_diag.iter().any(|a| (-a).exp() > 0.9));
        assert!(p.a_diag.iter().any(|a| (-a).exp() < 0.1));
        let d: Vec<f64> = p.b_delta.iter().map(|b| softplus(*b)).collect();
        assert!(d.iter().all(|v| (0.01 - 1e-12..=0.1 + 1e-12).contains(v)));
        assert!(SsmLayerParams::init(Variant::Mamba2 { heads: 3 }, 8, 4, InitRanges::default(), &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scan_equals_matrix_form(seed in 0u64..10_000, len in 1usize..64, dm in 1usize..4, ds in 1usize..5, two in any::<bool>()) {
            let variant = if two && dm % 2 == 0 { Variant::Mamba2 { heads: 2 } } else { Variant::Mamba };
            let p = random_layer(variant, dm, ds, seed);
            let x = random_inputs(len, dm, seed + 1);
            let groups = p.groups();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let scales = Scales {
                a: (0..groups).map(|_| rng.gen_range(0.2..3.0)).collect(),
                delta: (0..groups).map(|_| rng.gen_range(0.2..3.0)).collect(),
            };
            prop_assert!(scan_matrix_discrepancy(&p, &x, &scales).unwrap() < 1e-8);
        }

        #[test]
        fn discrete_eigenvalues_in_unit_interval(seed in 0u64..10_000, s in 0.01f64..20.0) {
            let p = random_layer(Variant::Mamba, 3, 4, seed);
            let x = random_inputs(1, 3, seed + 5).pop().unwrap();
            let scales = Scales { a: vec![s; 3], delta: vec![1.0; 3] };
            let step = discretize(&p, &x, &scales).unwrap();
            prop_assert!(step.a_bar.iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        #[test]
        fn scaling_a_is_power_of_eigenvalue(seed in 0u64..10_000, s in 0.05f64..8.0) {
            let p = random_layer(Variant::Mamba, 2, 3, seed);
            let x = random_inputs(1, 2, seed + 9).pop().unwrap();
            let base = discretize(&p, &x, &Scales::identity(2)).unwrap();
            let scaled = discretize(&p, &x, &Scales { a: vec![s; 2], delta: vec![1.0; 2] }).unwrap();
            for (b, v) in base.a_bar.iter().zip(&scaled.a_bar) {
                prop_assert!((b.powf(s) - v).abs() <= 1e-12 * v.max(1e-300) + 1e-300);
            }
        }

        #[test]
        fn causality(seed in 0u64..10_000, k in 0usize..12, eps in 0.01f64..1.0) {
            let p = random_layer(Variant::Mamba, 3, 2, seed);
            let x = random_inputs(12, 3, seed + 3);
            let mut xp = x.clone();
            xp[k][seed as usize % 3] += eps;
            let a = selective_scan(&p, &x, None, &Scales::identity(3)).unwrap();
            let b = selective_scan(&p, &xp, None, &Scales::identity(3)).unwrap();
            for t in 0..k {
                prop_assert_eq!(&a.outputs[t], &b.outputs[t]);
            }
        }

        #[test]
        fn transition_identity_long_runs(seed in 0u64..1000, n in 1usize..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..2.0)).collect();
            // keeps a·ΣΔ well clear of the subnormal range
            let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..0.03)).collect();
            let ct = cumulative_transition(&a, &deltas).unwrap();
            prop_assert!(ct.max_rel_diff < 1e-9);
        }
    }
}
