//! Training batches, held-out corpora and calibration sets per task.
//!
//! Every stream is a pure function of the experiment seed and a fixed salt,
//! so training, evaluation and calibration never share samples.

use rand::Rng;
use ssmlab_core::data::{self, gen_copy, gen_passkey, Babble, FillerSource};
use ssmlab_core::model::Sequence;
use ssmlab_core::rng;
use ssmlab_core::{Error, Result};

use crate::config::{TaskConfig, TaskKind};

const TRAIN_SALT: u64 = 0x7261_696E;
const EVAL_SALT: u64 = 0x6576_616C;
const CALIB_SALT: u64 = 0x6361_6C69;
const GRID_SALT: u64 = 0x6772_6964;

/// Materialized task state (the babble grammar or the loaded text).
#[derive(Debug, Clone)]
pub struct Task {
    pub config: TaskConfig,
    babble: Babble,
    /// Training and held-out split of a text corpus.
    text: Option<(Vec<u32>, Vec<u32>)>,
    filler: FillerSource,
}

impl Task {
    pub fn new(config: &TaskConfig) -> Result<Self> {
        let mut babble = Babble::new(config.grammar_seed);
        babble.switch_prob = config.switch_prob;
        let text = if config.text_paths.is_empty() {
            None
        } else {
            let paths: Vec<&std::path::Path> = config.text_paths.iter().map(|p| p.as_path()).collect();
            let all = data::load_text_corpora(&paths, config.boundary)?;
            let cut = ((1.0 - config.eval_fraction) * all.len() as f64).floor() as usize;
            Some((all[..cut].to_vec(), all[cut..].to_vec()))
        };
        // passkey filler: text when files are configured, babble otherwise
        let filler = match &text {
            Some((train, _)) if !train.is_empty() => FillerSource::Text(train.clone()),
            _ => FillerSource::Babble(babble.clone()),
        };
        Ok(Self {
            config: config.clone(),
            babble,
            text,
            filler,
        })
    }

    fn text_split(&self) -> Result<&(Vec<u32>, Vec<u32>)> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::Config("this task needs task.text_paths".into()))
    }

    pub fn filler(&self) -> &FillerSource {
        &self.filler
    }

    /// Batch `step` of training sequences, each `length` tokens long.
    pub fn training_batch(&self, seed: u64, step: usize, batch: usize, length: usize) -> Result<Vec<Sequence>> {
        let base = rng::mix(seed, TRAIN_SALT);
        (0..batch)
            .map(|k| {
                let seed = rng::mix(base, (step * batch + k) as u64);
                self.sample(seed, length, rng::stream(seed, 1).gen::<f64>())
            })
            .collect()
    }

    /// `n` calibration sequences of exactly `length` tokens.
    pub fn calibration_set(&self, seed: u64, length: usize, n: usize) -> Result<Vec<Sequence>> {
        let base = rng::mix(seed, CALIB_SALT);
        (0..n)
            .map(|k| {
                let depth = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                self.sample(rng::mix(base, k as u64), length, depth)
            })
            .collect()
    }

    /// One sequence; `depth` only matters for passkey samples.
    fn sample(&self, seed: u64, length: usize, depth: f64) -> Result<Sequence> {
        match self.config.kind {
            TaskKind::Babble => Ok(self.babble.lm_sequence(length, seed)),
            TaskKind::Passkey => Ok(gen_passkey(seed, length, depth, &self.filler)?.to_sequence()),
            TaskKind::Copy => gen_copy(seed, length, self.config.pattern_len),
            TaskKind::Text => {
                let src = &self.text_split()?.0;
                if src.len() < length {
                    return Err(Error::InsufficientCorpus {
                        required: length,
                        available: src.len(),
                    });
                }
                let start = rng::stream(seed, 2).gen_range(0..=src.len() - length);
                Ok(Sequence::unmasked(src[start..start + length].to_vec()))
            }
        }
    }

    /// Held-out token stream of at least `tokens` tokens for perplexity and
    /// state-norm evaluation. Text tasks return the whole held-out split.
    pub fn eval_corpus(&self, seed: u64, tokens: usize) -> Result<Vec<u32>> {
        let base = rng::mix(seed, EVAL_SALT);
        match self.config.kind {
            TaskKind::Babble | TaskKind::Passkey => Ok(self.babble.generate(tokens, base)),
            TaskKind::Copy => {
                let chunk = 4096.min(tokens.max(2 * self.config.pattern_len + 1));
                let mut out = Vec::with_capacity(tokens + chunk);
                let mut k = 0u64;
                while out.len() < tokens {
                    out.extend(gen_copy(rng::mix(base, k), chunk, self.config.pattern_len)?.tokens);
                    k += 1;
                }
                out.truncate(tokens);
                Ok(out)
            }
            TaskKind::Text => Ok(self.text_split()?.1.clone()),
        }
    }

    /// Seed of the passkey evaluation grid.
    pub fn grid_seed(seed: u64) -> u64 {
        rng::mix(seed, GRID_SALT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> Task {
        Task::new(&TaskConfig {
            kind,
            pattern_len: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn batches_are_deterministic_and_distinct() {
        for kind in [TaskKind::Babble, TaskKind::Passkey, TaskKind::Copy] {
            let t = task(kind);
            let a = t.training_batch(1, 3, 4, 64).unwrap();
            assert_eq!(a, t.training_batch(1, 3, 4, 64).unwrap());
            assert_ne!(a, t.training_batch(1, 4, 4, 64).unwrap());
            assert_ne!(a, t.training_batch(2, 3, 4, 64).unwrap());
            assert!(a.iter().all(|s| s.tokens.len() == 64));
        }
    }

    #[test]
    fn calibration_and_eval_streams_have_requested_sizes() {
        let t = task(TaskKind::Passkey);
        let c = t.calibration_set(0, 128, 5).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|s| s.tokens.len() == 128 && s.loss_mask.is_some()));
        assert_eq!(t.eval_corpus(0, 1000).unwrap().len(), 1000);
        assert_eq!(task(TaskKind::Copy).eval_corpus(0, 9000).unwrap().len(), 9000);
    }

    #[test]
    fn text_task_splits_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        std::fs::write(&path, (0..2000).map(|i| b'a' + (i % 26) as u8).collect::<Vec<u8>>()).unwrap();
        let t = Task::new(&TaskConfig {
            kind: TaskKind::Text,
            text_paths: vec![path],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(t.eval_corpus(0, 10).unwrap().len(), 200);
        let b = t.training_batch(0, 0, 2, 100).unwrap();
        assert!(b.iter().all(|s| s.tokens.len() == 100));
        assert!(matches!(
            t.training_batch(0, 0, 1, 5000),
            Err(Error::InsufficientCorpus { required: 5000, .. })
        ));
        assert!(matches!(t.filler(), FillerSource::Text(_)));
    }
}
