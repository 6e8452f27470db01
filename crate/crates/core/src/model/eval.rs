//! Perplexity as a function of context length.

use rayon::prelude::*;

use super::engine::Sequence;
use super::ToyModel;
use crate::error::{Error, Result};
use crate::ssm::Scales;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PplRow {
    pub length: usize,
    pub windows: usize,
    pub tokens: usize,
    pub mean_nll: f64,
    pub ppl: f64,
}

/// `exp(mean next-token cross-entropy)` over non-overlapping windows of each
/// length. A window of length `L` holds `L + 1` tokens so that it scores `L`
/// predictions. At most `max_windows` windows are taken from the start of
/// the corpus.
pub fn perplexity_by_length(
    model: &ToyModel,
    corpus: &[u32],
    lengths: &[usize],
    scales: &[Scales],
    max_windows: usize,
) -> Result<Vec<PplRow>> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("lengths must be strictly ascending".into()));
    }
    if max_windows == 0 {
        return Err(Error::InvalidArgument("max_windows must be positive".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len == 0 {
            return Err(Error::InvalidArgument("lengths must be positive".into()));
        }
        let available = corpus.len() / (len + 1);
        if available == 0 {
            return Err(Error::InsufficientCorpus {
                required: len + 1,
                available: corpus.len(),
            });
        }
        let windows = available.min(max_windows);
        let seqs: Vec<Sequence> = (0..windows)
            .map(|w| Sequence::unmasked(corpus[w * (len + 1)..(w + 1) * (len + 1)].to_vec()))
            .collect();
        let parts = seqs
            .par_iter()
            .map(|s| model.sequence_loss(s, scales))
            .collect::<Result<Vec<_>>>()?;
        let (sum, count) = parts.iter().fold((0.0, 0usize), |(a, n), (s, c)| (a + s, n + c));
        let mean = sum / count as f64;
        rows.push(PplRow {
            length: len,
            windows,
            tokens: count,
            mean_nll: mean,
            ppl: mean.exp(),
        });
    }
    Ok(rows)
}

pub fn ppl_csv(rows: &[PplRow]) -> String {
    let mut out = String::from("length,windows,tokens,mean_nll,ppl\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.10e},{:.10e}\n", r.length, r.windows, r.tokens, r.mean_nll, r.ppl));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModelConfig, VariantKind};

    fn flat_model() -> ToyModel {
        let mut m = ToyModel::build(&ToyModelConfig {
            vocab_size: 13,
            d_model: 8,
            d_state: 2,
            layers: 1,
            variant: VariantKind::Mamba,
            heads: 1,
            train_length: 32,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        m.w_out.data.iter_mut().for_each(|v| *v = 0.0);
        m
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let m = flat_model();
        let corpus: Vec<u32> = (0..500).map(|i| (i * 7 % 13) as u32).collect();
        let rows = perplexity_by_length(&m, &corpus, &[4, 16, 64], &m.identity_scales(), 3).unwrap();
        for r in &rows {
            assert!((r.ppl - 13.0).abs() < 1e-9, "{r:?}");
        }
        assert_eq!(rows[2].windows, 3);
        assert!(ppl_csv(&rows).starts_with("length,windows,tokens,mean_nll,ppl\n"));
    }

    #[test]
    fn short_corpus_names_requirement() {
        let m = flat_model();
        match perplexity_by_length(&m, &[1, 2, 3], &[8], &m.identity_scales(), 1) {
            Err(Error::InsufficientCorpus { required: 9, available: 3 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(perplexity_by_length(&m, &[1; 100], &[8, 4], &m.identity_scales(), 1).is_err());
    }
}
