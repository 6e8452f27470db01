//! State-norm statistics of a toy model across context lengths.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LayerNormTrace, ToyModel};
use crate::ssm::Scales;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateNormRow {
    pub length: usize,
    pub layer: usize,
    /// Largest per-channel `‖h_t[c]‖₂` over the first `length` steps.
    pub max_norm: f64,
    /// Smallest per-channel `‖h_t[c]‖₂` over the first `length` steps.
    pub min_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateNormTable {
    pub rows: Vec<StateNormRow>,
}

impl StateNormTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,layer,max_norm,min_norm\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.10e},{:.10e}", r.length, r.layer, r.max_norm, r.min_norm).unwrap();
        }
        out
    }

    /// Lengths in table order.
    pub fn lengths(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.rows.iter().map(|r| r.length).collect();
        out.dedup();
        out
    }

    /// Max over min of the state norms across all layers at `length`.
    pub fn ratio(&self, length: usize) -> Option<f64> {
        let rows = self.rows.iter().filter(|r| r.length == length);
        let (mx, mn) = rows.fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), r| (a.max(r.max_norm), b.min(r.min_norm)));
        mx.is_finite().then_some(mx / mn)
    }
}

/// Runs the model over `n_sequences` consecutive windows of the corpus, each
/// `max(lengths)` tokens long, and records per-layer extremes of the
/// per-channel state norm over every prefix length. Because every length
/// sees a prefix of the same runs, `max_norm` is non-decreasing and
/// `min_norm` non-increasing in length.
pub fn track_model_state_norms(
    model: &ToyModel,
    corpus: &[u32],
    lengths: &[usize],
    n_sequences: usize,
    scales: &[Scales],
) -> Result<StateNormTable> {
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("lengths must be positive and strictly ascending".into()));
    }
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("n_sequences must be positive".into()));
    }
    let longest = *lengths.last().unwrap();
    if corpus.len() < n_sequences * longest {
        return Err(Error::InsufficientCorpus {
            required: n_sequences * longest,
            available: corpus.len(),
        });
    }
    let traces: Vec<Vec<LayerNormTrace>> = (0..n_sequences)
        .into_par_iter()
        .map(|k| Ok(model.forward_with_norms(&corpus[k * longest..(k + 1) * longest], scales)?.norms))
        .collect::<Result<_>>()?;
    let layers = model.blocks.len();
    let mut rows = Vec::with_capacity(lengths.len() * layers);
    for &len in lengths {
        for layer in 0..layers {
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            for run in &traces {
                let tr = &run[layer];
                mx = tr.channel_max[..len].iter().copied().fold(mx, f64::max);
                mn = tr.channel_min[..len].iter().copied().fold(mn, f64::min);
            }
            rows.push(StateNormRow {
                length: len,
                layer,
                max_norm: mx,
                min_norm: mn,
            });
        }
    }
    Ok(StateNormTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModelConfig, VariantKind};

    fn model(d_model: usize) -> ToyModel {
        ToyModel::build(&ToyModelConfig {
            vocab_size: 7,
            d_model,
            d_state: 4,
            layers: 2,
            variant: VariantKind::Mamba,
            heads: 1,
            train_length: 32,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn single_step_single_channel_has_equal_extremes() {
        let m = model(1);
        let t = track_model_state_norms(&m, &[3, 4, 5], &[1], 1, &m.identity_scales()).unwrap();
        assert_eq!(t.rows.len(), 2);
        for r in &t.rows {
            assert_eq!(r.max_norm, r.min_norm);
            assert!(r.max_norm > 0.0);
        }
        assert!(t.ratio(1).unwrap() >= 1.0);
    }

    #[test]
    fn extremes_are_monotone_in_length() {
        let m = model(8);
        let corpus = vec![4u32; 400];
        let lengths = [1, 5, 20, 100, 200];
        let t = track_model_state_norms(&m, &corpus, &lengths, 2, &m.identity_scales()).unwrap();
        assert_eq!(t.lengths(), lengths);
        for layer in 0..2 {
            let rows: Vec<_> = t.rows.iter().filter(|r| r.layer == layer).collect();
            for w in rows.windows(2) {
                assert!(w[1].max_norm >= w[0].max_norm);
                assert!(w[1].min_norm <= w[0].min_norm);
            }
        }
        assert!(t.to_csv().starts_with("length,layer,max_norm,min_norm\n"));
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = model(4);
        let s = m.identity_scales();
        assert!(track_model_state_norms(&m, &[1; 10], &[4, 2], 1, &s).is_err());
        assert!(matches!(
            track_model_state_norms(&m, &[1; 10], &[8], 2, &s),
            Err(Error::InsufficientCorpus { required: 16, available: 10 })
        ));
    }
}
