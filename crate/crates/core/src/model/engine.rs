//! Forward pass, loss and exact reverse-mode gradients.

use rayon::prelude::*;

use super::{Block, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::{gemm, sigmoid, softplus, Matrix, Op};
use crate::ssm::{Scales, Variant};

const RMS_EPS: f64 = 1e-6;

/// A token sequence with an optional loss mask.
///
/// `loss_mask[t]` selects whether the prediction of `tokens[t + 1]` from the
/// prefix `tokens[..=t]` counts towards the loss. `None` means every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Option<Vec<bool>>,
}

impl Sequence {
    pub fn unmasked(tokens: Vec<u32>) -> Self {
        Self { tokens, loss_mask: None }
    }

    fn counts(&self, t: usize) -> bool {
        self.loss_mask.as_ref().is_none_or(|m| m[t])
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::InvalidArgument("a training sequence needs at least two tokens".into()));
        }
        if let Some(m) = &self.loss_mask {
            if m.len() != self.tokens.len() - 1 {
                return Err(Error::InvalidArgument(format!(
                    "loss mask has {} entries, expected {}",
                    m.len(),
                    self.tokens.len() - 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-step state-norm statistics for one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerNormTrace {
    /// `‖h_t‖₂` over the whole layer state.
    pub total: Vec<f64>,
    /// Largest per-channel `‖h_t[c]‖₂`.
    pub channel_max: Vec<f64>,
    /// Smallest per-channel `‖h_t[c]‖₂`.
    pub channel_min: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T × vocab`.
    pub logits: Matrix,
    /// One entry per layer when norms were requested, otherwise empty.
    pub norms: Vec<LayerNormTrace>,
}

#[derive(Default)]
struct LayerCache {
    x_in: Vec<f64>,
    rms: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
    delta: Vec<f64>,
    bm: Vec<f64>,
    cm: Vec<f64>,
    a_bar: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    rms_final: Vec<f64>,
    z_final: Vec<f64>,
}

/// Gradients with the same layout as [`ToyModel::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, f: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= f);
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    const PER_BLOCK: usize = 8;

    fn block(&mut self, l: usize) -> &mut [Vec<f64>] {
        let start = 1 + l * Self::PER_BLOCK;
        &mut self.tensors[start..start + Self::PER_BLOCK]
    }
}

/// `∂loss/∂scale` per layer and group, for both hooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrads {
    pub a: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl ScaleGrads {
    fn zeros(layers: usize, groups: usize) -> Self {
        Self {
            a: vec![vec![0.0; groups]; layers],
            delta: vec![vec![0.0; groups]; layers],
        }
    }

    fn add_assign(&mut self, other: &ScaleGrads) {
        for (a, b) in self.a.iter_mut().zip(&other.a).chain(self.delta.iter_mut().zip(&other.delta)) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, f: f64) {
        self.a.iter_mut().chain(self.delta.iter_mut()).flatten().for_each(|v| *v *= f);
    }
}

/// Summed loss over counted positions, plus requested gradients of the
/// mean loss (`loss_sum / count`).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss_sum: f64,
    pub count: usize,
    pub params: Option<ParamGrads>,
    pub scales: Option<ScaleGrads>,
}

impl LossGrad {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }
}

fn rms_forward(x: &[f64], g: &[f64], t: usize, d: usize, out: &mut [f64], rms: &mut [f64]) {
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = (ms + RMS_EPS).sqrt();
        rms[r] = s;
        for j in 0..d {
            out[r * d + j] = g[j] * row[j] / s;
        }
    }
}

/// Adds `∂/∂x` into `dx` and `∂/∂g` into `dg`.
fn rms_backward(x: &[f64], g: &[f64], rms: &[f64], dz: &[f64], t: usize, d: usize, dx: &mut [f64], dg: &mut [f64]) {
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let dzr = &dz[r * d..(r + 1) * d];
        let s = rms[r];
        let mut dot = 0.0;
        for j in 0..d {
            dg[j] += dzr[j] * xr[j] / s;
            dot += g[j] * dzr[j] * xr[j];
        }
        let coef = dot / (d as f64 * s * s * s);
        for j in 0..d {
            dx[r * d + j] += g[j] * dzr[j] / s - xr[j] * coef;
        }
    }
}

impl Block {
    /// Runs the block in place on the residual stream `x` (`t × d`).
    fn forward(
        &self,
        layer: usize,
        x: &mut [f64],
        t_len: usize,
        scales: &Scales,
        cache: Option<&mut LayerCache>,
        norms: Option<&mut LayerNormTrace>,
    ) -> Result<()> {
        let p = &self.ssm;
        let (d, s, g_n) = (p.d_model, p.d_state, p.groups());
        let mut u = vec![0.0; t_len * d];
        let mut rms = vec![0.0; t_len];
        rms_forward(x, &self.norm, t_len, d, &mut u, &mut rms);

        let mut z = vec![0.0; t_len * g_n];
        for r in 0..t_len {
            z[r * g_n..(r + 1) * g_n].copy_from_slice(&p.b_delta);
        }
        gemm(1.0, &u, (t_len, d), Op::N, &p.w_delta.data, (g_n, d), Op::T, 1.0, &mut z);
        let delta: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, zv)| softplus(*zv) * scales.delta[k % g_n])
            .collect();
        let mut bm = vec![0.0; t_len * s];
        let mut cm = vec![0.0; t_len * s];
        gemm(1.0, &u, (t_len, d), Op::N, &p.w_b.data, (s, d), Op::T, 0.0, &mut bm);
        gemm(1.0, &u, (t_len, d), Op::N, &p.w_c.data, (s, d), Op::T, 0.0, &mut cm);

        let keep = cache.is_some();
        let mut h_all = if keep { vec![0.0; t_len * d * s] } else { Vec::new() };
        let mut ab_all = if keep { vec![0.0; t_len * d * s] } else { Vec::new() };
        let mut h = vec![0.0; d * s];
        let mut ab = vec![0.0; d * s];
        let mut y = vec![0.0; t_len * d];
        let mut norms = norms;
        for t in 0..t_len {
            let dt = &delta[t * g_n..(t + 1) * g_n];
            match p.variant {
                Variant::Mamba => {
                    for c in 0..d {
                        let k = dt[c] * scales.a[c];
                        for i in 0..s {
                            ab[c * s + i] = (-k * p.a_diag[c * s + i]).exp();
                        }
                    }
                }
                Variant::Mamba2 { heads } => {
                    let per = d / heads;
                    for hd in 0..heads {
                        let v = (-dt[hd] * scales.a[hd] * p.a_diag[hd]).exp();
                        ab[hd * per * s..(hd + 1) * per * s].fill(v);
                    }
                }
            }
            let ut = &u[t * d..(t + 1) * d];
            let bt = &bm[t * s..(t + 1) * s];
            let ct = &cm[t * s..(t + 1) * s];
            for c in 0..d {
                let xc = dt[p.group_of(c)] * ut[c];
                let hc = &mut h[c * s..(c + 1) * s];
                let abc = &ab[c * s..(c + 1) * s];
                let mut acc = 0.0;
                for i in 0..s {
                    hc[i] = abc[i] * hc[i] + xc * bt[i];
                    acc += ct[i] * hc[i];
                }
                y[t * d + c] = acc + self.d_skip[c] * ut[c];
            }
            if !y[t * d..(t + 1) * d].iter().all(|v| v.is_finite()) {
                return Err(Error::StateOverflow { layer, step: t });
            }
            if keep {
                h_all[t * d * s..(t + 1) * d * s].copy_from_slice(&h);
                ab_all[t * d * s..(t + 1) * d * s].copy_from_slice(&ab);
            }
            if let Some(tr) = norms.as_deref_mut() {
                let (mut total, mut mx, mut mn) = (0.0, 0.0f64, f64::INFINITY);
                for hc in h.chunks(s) {
                    let sq: f64 = hc.iter().map(|v| v * v).sum();
                    total += sq;
                    mx = mx.max(sq);
                    mn = mn.min(sq);
                }
                if !total.is_finite() {
                    return Err(Error::StateOverflow { layer, step: t });
                }
                tr.total.push(total.sqrt());
                tr.channel_max.push(mx.sqrt());
                tr.channel_min.push(mn.sqrt());
            }
        }

        let x_in = keep.then(|| x.to_vec());
        gemm(1.0, &y, (t_len, d), Op::N, &self.w_o.data, (d, d), Op::T, 1.0, x);
        if let Some(c) = cache {
            c.x_in = x_in.expect("kept when caching");
            c.rms = rms;
            c.u = u;
            c.z = z;
            c.delta = delta;
            c.bm = bm;
            c.cm = cm;
            c.a_bar = ab_all;
            c.h = h_all;
            c.y = y;
        }
        Ok(())
    }

    /// Given `dx` = ∂loss/∂(block output), overwrite it with ∂loss/∂(block
    /// input) and accumulate parameter and scale gradients.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        c: &LayerCache,
        t_len: usize,
        scales: &Scales,
        dx: &mut [f64],
        pg: Option<&mut [Vec<f64>]>,
        da_scale: &mut [f64],
        ddelta_scale: &mut [f64],
    ) {
        let p = &self.ssm;
        let (d, s, g_n) = (p.d_model, p.d_state, p.groups());

        // out = y W_oᵀ
        let mut dy = vec![0.0; t_len * d];
        gemm(1.0, dx, (t_len, d), Op::N, &self.w_o.data, (d, d), Op::N, 0.0, &mut dy);
        let mut du = vec![0.0; t_len * d];
        let mut d_skip = vec![0.0; d];
        for k in 0..t_len * d {
            let ch = k % d;
            d_skip[ch] += dy[k] * c.u[k];
            du[k] += dy[k] * self.d_skip[ch];
        }

        let mut dbm = vec![0.0; t_len * s];
        let mut dcm = vec![0.0; t_len * s];
        let mut ddelta = vec![0.0; t_len * g_n];
        let mut da = vec![0.0; p.a_diag.len()];
        let mut carry = vec![0.0; d * s];
        let zeros = vec![0.0; d * s];
        for t in (0..t_len).rev() {
            let hs = &c.h[t * d * s..(t + 1) * d * s];
            let hp = if t > 0 { &c.h[(t - 1) * d * s..t * d * s] } else { &zeros[..] };
            let abs_ = &c.a_bar[t * d * s..(t + 1) * d * s];
            let bt = &c.bm[t * s..(t + 1) * s];
            let ct = &c.cm[t * s..(t + 1) * s];
            for ch in 0..d {
                let grp = p.group_of(ch);
                let dl = c.delta[t * g_n + grp];
                let sa = scales.a[grp];
                let uc = c.u[t * d + ch];
                let dyc = dy[t * d + ch];
                let (mut dl_acc, mut du_acc, mut q_acc) = (0.0, 0.0, 0.0);
                for i in 0..s {
                    let k = ch * s + i;
                    let gi = carry[k] + dyc * ct[i];
                    dcm[t * s + i] += dyc * hs[k];
                    dl_acc += gi * bt[i] * uc;
                    dbm[t * s + i] += gi * dl * uc;
                    du_acc += gi * dl * bt[i];
                    // q = ∂loss/∂(log a_bar) = ∂loss/∂a_bar · a_bar
                    let q = gi * hp[k] * abs_[k];
                    let ai = p.a_diag[p.a_index(ch, i)];
                    dl_acc -= q * sa * ai;
                    da[p.a_index(ch, i)] -= q * dl * sa;
                    q_acc += q * ai;
                    carry[k] = abs_[k] * gi;
                }
                ddelta[t * g_n + grp] += dl_acc;
                du[t * d + ch] += du_acc;
                da_scale[grp] -= q_acc * dl;
            }
        }

        // delta = softplus(z) * delta_scale
        let mut dz = vec![0.0; t_len * g_n];
        for k in 0..t_len * g_n {
            let grp = k % g_n;
            dz[k] = ddelta[k] * scales.delta[grp] * sigmoid(c.z[k]);
            ddelta_scale[grp] += ddelta[k] * softplus(c.z[k]);
        }
        gemm(1.0, &dz, (t_len, g_n), Op::N, &p.w_delta.data, (g_n, d), Op::N, 1.0, &mut du);
        gemm(1.0, &dbm, (t_len, s), Op::N, &p.w_b.data, (s, d), Op::N, 1.0, &mut du);
        gemm(1.0, &dcm, (t_len, s), Op::N, &p.w_c.data, (s, d), Op::N, 1.0, &mut du);

        let mut dx_in = dx.to_vec();
        let mut dnorm = vec![0.0; d];
        rms_backward(&c.x_in, &self.norm, &c.rms, &du, t_len, d, &mut dx_in, &mut dnorm);

        if let Some(pg) = pg {
            // order: norm, a, w_delta, b_delta, w_b, w_c, d_skip, w_o
            pg[0].iter_mut().zip(&dnorm).for_each(|(a, b)| *a += b);
            pg[1].iter_mut().zip(&da).for_each(|(a, b)| *a += b);
            gemm(1.0, &dz, (t_len, g_n), Op::T, &c.u, (t_len, d), Op::N, 1.0, &mut pg[2]);
            for k in 0..t_len * g_n {
                pg[3][k % g_n] += dz[k];
            }
            gemm(1.0, &dbm, (t_len, s), Op::T, &c.u, (t_len, d), Op::N, 1.0, &mut pg[4]);
            gemm(1.0, &dcm, (t_len, s), Op::T, &c.u, (t_len, d), Op::N, 1.0, &mut pg[5]);
            pg[6].iter_mut().zip(&d_skip).for_each(|(a, b)| *a += b);
            gemm(1.0, dx, (t_len, d), Op::T, &c.y, (t_len, d), Op::N, 1.0, &mut pg[7]);
        }
        dx.copy_from_slice(&dx_in);
    }
}

impl ToyModel {
    fn embed_tokens(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (r, tok) in tokens.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(self.embed.row(*tok as usize));
        }
        x
    }

    fn readout(&self, z: &[f64], t_len: usize) -> Matrix {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut logits = Matrix::zeros(t_len, v);
        for r in 0..t_len {
            logits.row_mut(r).copy_from_slice(&self.b_out);
        }
        gemm(1.0, z, (t_len, d), Op::N, &self.w_out.data, (v, d), Op::T, 1.0, &mut logits.data);
        logits
    }

    fn run(&self, tokens: &[u32], scales: &[Scales], record_norms: bool, cache: Option<&mut ForwardCache>) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_scales(scales)?;
        let (t_len, d) = (tokens.len(), self.config.d_model);
        let mut x = self.embed_tokens(tokens);
        let mut norms = Vec::new();
        let mut cache = cache;
        for (l, block) in self.blocks.iter().enumerate() {
            let mut trace = LayerNormTrace::default();
            let lc = cache.as_deref_mut().map(|c| &mut c.layers[l]);
            block.forward(l, &mut x, t_len, &scales[l], lc, record_norms.then_some(&mut trace))?;
            if record_norms {
                norms.push(trace);
            }
        }
        let mut z = vec![0.0; t_len * d];
        let mut rms = vec![0.0; t_len];
        rms_forward(&x, &self.norm_f, t_len, d, &mut z, &mut rms);
        let logits = self.readout(&z, t_len);
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        if let Some(c) = cache {
            c.x_final = x;
            c.rms_final = rms;
            c.z_final = z;
        }
        Ok(ForwardOutput { logits, norms })
    }

    /// Causal next-token logits. `scales = None` runs without scaling hooks.
    pub fn forward(&self, tokens: &[u32], scales: Option<&[Scales]>) -> Result<ForwardOutput> {
        let ident;
        let scales = match scales {
            Some(s) => s,
            None => {
                ident = self.identity_scales();
                &ident
            }
        };
        self.run(tokens, scales, false, None)
    }

    /// Forward pass that also records per-layer state-norm traces.
    pub fn forward_with_norms(&self, tokens: &[u32], scales: &[Scales]) -> Result<ForwardOutput> {
        self.run(tokens, scales, true, None)
    }

    /// Summed cross-entropy and counted positions for one sequence.
    pub fn sequence_loss(&self, seq: &Sequence, scales: &[Scales]) -> Result<(f64, usize)> {
        seq.validate()?;
        let n = seq.tokens.len() - 1;
        let out = self.run(&seq.tokens[..n], scales, false, None)?;
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..n {
            if seq.counts(t) {
                sum += cross_entropy_row(out.logits.row(t), seq.tokens[t + 1] as usize, None);
                count += 1;
            }
        }
        Ok((sum, count))
    }

    /// Token-weighted mean cross-entropy over `seqs`, evaluated in parallel
    /// and reduced in sequence order.
    pub fn mean_loss(&self, seqs: &[Sequence], scales: &[Scales]) -> Result<f64> {
        let parts = seqs
            .par_iter()
            .map(|s| self.sequence_loss(s, scales))
            .collect::<Result<Vec<_>>>()?;
        let (sum, count) = parts.iter().fold((0.0, 0usize), |(a, n), (s, c)| (a + s, n + c));
        if count == 0 {
            return Err(Error::InvalidArgument("no counted positions in the evaluation set".into()));
        }
        Ok(sum / count as f64)
    }

    fn sequence_loss_grad(&self, seq: &Sequence, scales: &[Scales], want_params: bool, want_scales: bool) -> Result<LossGrad> {
        seq.validate()?;
        let n = seq.tokens.len() - 1;
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut cache = ForwardCache {
            layers: (0..self.blocks.len()).map(|_| LayerCache::default()).collect(),
            x_final: Vec::new(),
            rms_final: Vec::new(),
            z_final: Vec::new(),
        };
        let out = self.run(&seq.tokens[..n], scales, false, Some(&mut cache))?;
        let mut dlogits = vec![0.0; n * v];
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..n {
            if seq.counts(t) {
                sum += cross_entropy_row(out.logits.row(t), seq.tokens[t + 1] as usize, Some(&mut dlogits[t * v..(t + 1) * v]));
                count += 1;
            }
        }
        let mut pg = want_params.then(|| ParamGrads::zeros_like(self));
        let mut sg = ScaleGrads::zeros(self.blocks.len(), self.config.groups());

        let nt = self.tensors().len();
        if let Some(pg) = pg.as_mut() {
            gemm(1.0, &dlogits, (n, v), Op::T, &cache.z_final, (n, d), Op::N, 1.0, &mut pg.tensors[nt - 2]);
            for t in 0..n {
                pg.tensors[nt - 1].iter_mut().zip(&dlogits[t * v..(t + 1) * v]).for_each(|(a, b)| *a += b);
            }
        }
        let mut dz = vec![0.0; n * d];
        gemm(1.0, &dlogits, (n, v), Op::N, &self.w_out.data, (v, d), Op::N, 0.0, &mut dz);
        let mut dx = vec![0.0; n * d];
        let mut dnorm_f = vec![0.0; d];
        rms_backward(&cache.x_final, &self.norm_f, &cache.rms_final, &dz, n, d, &mut dx, &mut dnorm_f);
        if let Some(pg) = pg.as_mut() {
            pg.tensors[nt - 3] = dnorm_f;
        }
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let bg = pg.as_mut().map(|g| g.block(l));
            let (sa, sd) = (&mut sg.a[l], &mut sg.delta[l]);
            block.backward(&cache.layers[l], n, &scales[l], &mut dx, bg, sa, sd);
        }
        if let Some(pg) = pg.as_mut() {
            for (t, tok) in seq.tokens[..n].iter().enumerate() {
                let row = &mut pg.tensors[0][*tok as usize * d..(*tok as usize + 1) * d];
                row.iter_mut().zip(&dx[t * d..(t + 1) * d]).for_each(|(a, b)| *a += b);
            }
        }
        Ok(LossGrad {
            loss_sum: sum,
            count,
            params: pg,
            scales: want_scales.then_some(sg),
        })
    }

    /// Mean cross-entropy over `seqs` with gradients of that mean.
    ///
    /// Sequences are processed in parallel; partial results are summed in
    /// sequence order so the output does not depend on the thread count.
    pub fn loss_and_grads(&self, seqs: &[Sequence], scales: &[Scales], want_params: bool, want_scales: bool) -> Result<LossGrad> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let parts = seqs
            .par_iter()
            .map(|s| self.sequence_loss_grad(s, scales, want_params, want_scales))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let mut total = iter.next().expect("non-empty batch");
        for p in iter {
            total.loss_sum += p.loss_sum;
            total.count += p.count;
            if let (Some(a), Some(b)) = (total.params.as_mut(), p.params.as_ref()) {
                a.add_assign(b);
            }
            if let (Some(a), Some(b)) = (total.scales.as_mut(), p.scales.as_ref()) {
                a.add_assign(b);
            }
        }
        if total.count == 0 {
            return Err(Error::InvalidArgument("no counted positions in the batch".into()));
        }
        let inv = 1.0 / total.count as f64;
        if let Some(g) = total.params.as_mut() {
            g.scale(inv);
        }
        if let Some(g) = total.scales.as_mut() {
            g.scale(inv);
        }
        Ok(total)
    }
}

/// `−log softmax(logits)[target]`; optionally adds its gradient into `grad`.
pub(crate) fn cross_entropy_row(logits: &[f64], target: usize, grad: Option<&mut [f64]>) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + sum.ln();
    if let Some(g) = grad {
        for (k, (gv, l)) in g.iter_mut().zip(logits).enumerate() {
            *gv += (l - lse).exp() - if k == target { 1.0 } else { 0.0 };
        }
    }
    lse - logits[target]
}
