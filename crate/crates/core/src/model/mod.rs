//! A small selective-SSM language model with hand-written reverse mode.
//!
//! Architecture: token embedding, `layers` pre-norm residual blocks and a
//! normalized linear readout. Each block computes
//!
//! ```text
//! u = g ⊙ x / rms(x)
//! y = scan(u) + D ⊙ u          (one selective SSM channel per model dim)
//! x ← x + W_o y
//! ```

mod checkpoint;
mod engine;
mod eval;
mod train;

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use engine::{ForwardOutput, LayerNormTrace, LossGrad, ParamGrads, ScaleGrads, Sequence};
pub use eval::{perplexity_by_length, ppl_csv, PplRow};
pub use train::{train, AdamConfig, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ssm::{InitRanges, Scales, SsmLayerParams, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Mamba,
    Mamba2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// State size per channel.
    pub d_state: usize,
    pub layers: usize,
    pub variant: VariantKind,
    /// Head count for the Mamba2 variant; ignored for Mamba.
    pub heads: usize,
    pub train_length: usize,
    pub seed: u64,
    pub a_min: f64,
    pub a_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        let r = InitRanges::default();
        Self {
            vocab_size: 256,
            d_model: 128,
            d_state: 16,
            layers: 4,
            variant: VariantKind::Mamba,
            heads: 8,
            train_length: 256,
            seed: 0,
            a_min: r.a_min,
            a_max: r.a_max,
            delta_min: r.delta_min,
            delta_max: r.delta_max,
        }
    }
}

impl ToyModelConfig {
    pub fn ssm_variant(&self) -> Variant {
        match self.variant {
            VariantKind::Mamba => Variant::Mamba,
            VariantKind::Mamba2 => Variant::Mamba2 { heads: self.heads },
        }
    }

    /// Scaling groups per layer (channels for Mamba, heads for Mamba2).
    pub fn groups(&self) -> usize {
        match self.variant {
            VariantKind::Mamba => self.d_model,
            VariantKind::Mamba2 => self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("layers", self.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.train_length < 32 {
            return Err(Error::Config(format!("train_length must be at least 32, got {}", self.train_length)));
        }
        if self.variant == VariantKind::Mamba2 && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        let ranges_ok = 0.0 < self.a_min
            && self.a_min <= self.a_max
            && self.a_max.is_finite()
            && 0.0 < self.delta_min
            && self.delta_min <= self.delta_max
            && self.delta_max.is_finite();
        if !ranges_ok {
            return Err(Error::Config("initialization ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (v, d, s) = (self.vocab_size, self.d_model, self.d_state);
        let g = self.groups();
        let a = match self.variant {
            VariantKind::Mamba => d * s,
            VariantKind::Mamba2 => self.heads,
        };
        let block = d + a + g * d + g + 2 * s * d + d + d * d;
        v * d + self.layers * block + d + v * d + v
    }

    fn init_ranges(&self) -> InitRanges {
        InitRanges {
            a_min: self.a_min,
            a_max: self.a_max,
            delta_min: self.delta_min,
            delta_max: self.delta_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm: Vec<f64>,
    pub ssm: SsmLayerParams,
    pub d_skip: Vec<f64>,
    /// `d_model × d_model`.
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    /// `vocab × d_model`.
    pub embed: Matrix,
    pub blocks: Vec<Block>,
    pub norm_f: Vec<f64>,
    /// `vocab × d_model`.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub steps_trained: usize,
    pub final_loss: f64,
}

/// How a tensor is updated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Plain,
    /// Positive diagonal of `A`, updated in log space.
    LogPositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

impl ToyModel {
    /// Deterministic initialization from `cfg.seed`.
    pub fn build(cfg: &ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let embed = Matrix::randn(cfg.vocab_size, d, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let ssm = SsmLayerParams::init(cfg.ssm_variant(), d, cfg.d_state, cfg.init_ranges(), &mut rng)?;
            let w_o = Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
            blocks.push(Block {
                norm: vec![1.0; d],
                ssm,
                d_skip: vec![1.0; d],
                w_o,
            });
        }
        let w_out = Matrix::randn(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config: cfg.clone(),
            embed,
            blocks,
            norm_f: vec![1.0; d],
            w_out,
            b_out: vec![0.0; cfg.vocab_size],
            steps_trained: 0,
            final_loss: f64::NAN,
        })
    }

    pub fn identity_scales(&self) -> Vec<Scales> {
        vec![Scales::identity(self.config.groups()); self.blocks.len()]
    }

    /// Names, shapes and update kinds in canonical order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (v, d, s) = (self.config.vocab_size, self.config.d_model, self.config.d_state);
        let g = self.config.groups();
        let spec = |name: String, shape: Vec<usize>| TensorSpec {
            name,
            shape,
            kind: TensorKind::Plain,
        };
        let mut out = vec![spec("embed".into(), vec![v, d])];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(spec(format!("blocks.{l}.norm"), vec![d]));
            out.push(TensorSpec {
                name: format!("blocks.{l}.a"),
                shape: vec![b.ssm.a_diag.len()],
                kind: TensorKind::LogPositive,
            });
            out.push(spec(format!("blocks.{l}.w_delta"), vec![g, d]));
            out.push(spec(format!("blocks.{l}.b_delta"), vec![g]));
            out.push(spec(format!("blocks.{l}.w_b"), vec![s, d]));
            out.push(spec(format!("blocks.{l}.w_c"), vec![s, d]));
            out.push(spec(format!("blocks.{l}.d_skip"), vec![d]));
            out.push(spec(format!("blocks.{l}.w_o"), vec![d, d]));
        }
        out.push(spec("norm_f".into(), vec![d]));
        out.push(spec("w_out".into(), vec![v, d]));
        out.push(spec("b_out".into(), vec![v]));
        out
    }

    /// Parameter slices in [`Self::tensor_specs`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embed.data];
        for b in &self.blocks {
            out.extend([
                &b.norm[..],
                &b.ssm.a_diag,
                &b.ssm.w_delta.data,
                &b.ssm.b_delta,
                &b.ssm.w_b.data,
                &b.ssm.w_c.data,
                &b.d_skip,
                &b.w_o.data,
            ]);
        }
        out.extend([&self.norm_f[..], &self.w_out.data, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embed.data];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm[..],
                &mut b.ssm.a_diag,
                &mut b.ssm.w_delta.data,
                &mut b.ssm.b_delta,
                &mut b.ssm.w_b.data,
                &mut b.ssm.w_c.data,
                &mut b.d_skip,
                &mut b.w_o.data,
            ]);
        }
        out.extend([&mut self.norm_f[..], &mut self.w_out.data, &mut self.b_out]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over every parameter's bit pattern, in canonical order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn ssm_layers(&self) -> impl Iterator<Item = &SsmLayerParams> {
        self.blocks.iter().map(|b| &b.ssm)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("token sequence is empty".into()));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_scales(&self, scales: &[Scales]) -> Result<()> {
        if scales.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "expected scales for {} layers, got {}",
                self.blocks.len(),
                scales.len()
            )));
        }
        scales.iter().try_for_each(|s| s.validate(self.config.groups()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: VariantKind) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: 11,
            d_model: 8,
            d_state: 4,
            layers: 2,
            variant,
            heads: 2,
            train_length: 32,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = ToyModel::build(&tiny(VariantKind::Mamba)).unwrap();
        let b = ToyModel::build(&tiny(VariantKind::Mamba)).unwrap();
        assert_eq!(a.config, b.config);
        assert_eq!(a.checksum(), b.checksum());
        let c = ToyModel::build(&ToyModelConfig { seed: 6, ..tiny(VariantKind::Mamba) }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_count_matches_config() {
        for v in [VariantKind::Mamba, VariantKind::Mamba2] {
            let cfg = tiny(v);
            let m = ToyModel::build(&cfg).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
            let specs = m.tensor_specs();
            assert_eq!(specs.len(), m.tensors().len());
            for (s, t) in specs.iter().zip(m.tensors()) {
                assert_eq!(s.shape.iter().product::<usize>(), t.len(), "{}", s.name);
            }
        }
    }

    #[test]
    fn mamba2_shares_a_within_head() {
        let m = ToyModel::build(&tiny(VariantKind::Mamba2)).unwrap();
        for b in &m.blocks {
            assert_eq!(b.ssm.a_diag.len(), 2);
            for ch in 0..8 {
                let head = ch / 4;
                for i in 0..4 {
                    assert_eq!(b.ssm.a(ch, i), b.ssm.a_diag[head]);
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(ToyModel::build(&ToyModelConfig { train_length: 16, ..tiny(VariantKind::Mamba) }).is_err());
        assert!(ToyModel::build(&ToyModelConfig { heads: 3, ..tiny(VariantKind::Mamba2) }).is_err());
        assert!(ToyModel::build(&ToyModelConfig { d_model: 0, ..tiny(VariantKind::Mamba) }).is_err());
    }
}
