//! Deterministic task generators and corpus loaders.
//!
//! Synthetic tasks share a 64-symbol vocabulary: four control tokens, ten
//! digits and fifty "words". Filler text is a topic-switching Markov babble
//! over the words: each topic has its own sparse bigram table, and the topic
//! changes at random, so predicting well needs some longer-range context.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Sequence, ToyModel};
use crate::rng;
use crate::ssm::Scales;

pub const BOS: u32 = 0;
pub const KEY: u32 = 1;
pub const QUERY: u32 = 2;
pub const DELIM: u32 = 3;
pub const DIGIT0: u32 = 4;
pub const FIRST_WORD: u32 = 14;
pub const NUM_WORDS: u32 = 50;
pub const SYMBOLIC_VOCAB: usize = 64;

pub const PASSKEY_DIGITS: usize = 5;
/// BOS, KEY, the embedded digits, QUERY and the answer digits.
pub const PASSKEY_OVERHEAD: usize = 3 + 2 * PASSKEY_DIGITS;

pub fn digit_token(d: u8) -> u32 {
    DIGIT0 + d as u32
}

pub fn token_digit(t: u32) -> Option<u8> {
    (DIGIT0..DIGIT0 + 10).contains(&t).then(|| (t - DIGIT0) as u8)
}

/// Topic-switching bigram language over the word tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Babble {
    /// `topics × words × successors`: candidate next words.
    successors: Vec<Vec<Vec<u32>>>,
    /// Unnormalized weights paired with `successors`.
    weights: Vec<Vec<Vec<f64>>>,
    pub switch_prob: f64,
}

impl Babble {
    pub const TOPICS: usize = 8;
    const SUCCESSORS: usize = 6;

    /// The language itself; every stream drawn from it shares these tables.
    pub fn new(grammar_seed: u64) -> Self {
        let mut rng = rng::stream(grammar_seed, 0xBABB1E);
        let words: Vec<u32> = (FIRST_WORD..FIRST_WORD + NUM_WORDS).collect();
        let mut successors = Vec::with_capacity(Self::TOPICS);
        let mut weights = Vec::with_capacity(Self::TOPICS);
        for _ in 0..Self::TOPICS {
            // each topic favors a third of the vocabulary
            let mut pool = words.clone();
            pool.shuffle(&mut rng);
            pool.truncate(words.len() / 3 + Self::SUCCESSORS);
            let mut s_t = Vec::with_capacity(words.len());
            let mut w_t = Vec::with_capacity(words.len());
            for _ in &words {
                let next: Vec<u32> = pool.choose_multiple(&mut rng, Self::SUCCESSORS).copied().collect();
                let w: Vec<f64> = (0..Self::SUCCESSORS).map(|k| 0.5f64.powi(k as i32) * rng.gen_range(0.8..1.2)).collect();
                s_t.push(next);
                w_t.push(w);
            }
            successors.push(s_t);
            weights.push(w_t);
        }
        Self {
            successors,
            weights,
            switch_prob: 1.0 / 300.0,
        }
    }

    fn sample_next(&self, rng: &mut ChaCha8Rng, topic: usize, prev: u32) -> u32 {
        let idx = (prev - FIRST_WORD) as usize;
        let w = &self.weights[topic][idx];
        let total: f64 = w.iter().sum();
        let mut r = rng.gen::<f64>() * total;
        for (k, wk) in w.iter().enumerate() {
            r -= wk;
            if r <= 0.0 {
                return self.successors[topic][idx][k];
            }
        }
        *self.successors[topic][idx].last().expect("non-empty successor list")
    }

    /// `len` word tokens, a pure function of `(self, seed)`.
    pub fn generate(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = rng::stream(seed, 0xF111);
        self.generate_with(&mut rng, len)
    }

    fn generate_with(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut topic = rng.gen_range(0..Self::TOPICS);
        let mut prev = FIRST_WORD + rng.gen_range(0..NUM_WORDS);
        for _ in 0..len {
            if rng.gen::<f64>() < self.switch_prob {
                topic = rng.gen_range(0..Self::TOPICS);
            }
            prev = self.sample_next(rng, topic, prev);
            out.push(prev);
        }
        out
    }

    /// A babble stream prefixed by BOS, as an unmasked LM sequence.
    pub fn lm_sequence(&self, len: usize, seed: u64) -> Sequence {
        let mut tokens = Vec::with_capacity(len);
        tokens.push(BOS);
        tokens.extend(self.generate(len - 1, seed));
        Sequence::unmasked(tokens)
    }
}

/// Where passkey filler comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum FillerSource {
    Babble(Babble),
    /// Word tokens cycled from a fixed stream at a seed-dependent offset.
    Text(Vec<u32>),
}

impl FillerSource {
    /// Maps arbitrary bytes onto word tokens so a local text file can serve
    /// as filler.
    pub fn from_text_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::InvalidArgument("filler text is empty".into()));
        }
        Ok(FillerSource::Text(bytes.iter().map(|b| FIRST_WORD + (*b as u32) % NUM_WORDS).collect()))
    }

    fn fill(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
        match self {
            FillerSource::Babble(b) => b.generate_with(rng, len),
            FillerSource::Text(t) => {
                let start = rng.gen_range(0..t.len());
                (0..len).map(|k| t[(start + k) % t.len()]).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasskeySample {
    pub tokens: Vec<u32>,
    /// Half-open range of the embedded digits.
    pub answer_span: (usize, usize),
    /// Half-open range of the digits that follow QUERY (the model's answer).
    pub query_span: (usize, usize),
    pub depth: f64,
    pub length: usize,
    pub passkey: [u8; PASSKEY_DIGITS],
}

impl PasskeySample {
    pub fn decode(&self, span: (usize, usize)) -> Option<Vec<u8>> {
        self.tokens[span.0..span.1].iter().map(|t| token_digit(*t)).collect()
    }

    /// Sequence whose loss covers only the answer digits after QUERY.
    pub fn to_sequence(&self) -> Sequence {
        let n = self.tokens.len();
        let mask = (0..n - 1).map(|t| t + 1 >= self.query_span.0).collect();
        Sequence {
            tokens: self.tokens.clone(),
            loss_mask: Some(mask),
        }
    }
}

/// `BOS filler KEY d1..d5 filler QUERY d1..d5`, with the key block starting
/// after `round(depth · filler)` filler tokens.
pub fn gen_passkey(seed: u64, length: usize, depth: f64, filler: &FillerSource) -> Result<PasskeySample> {
    if length < PASSKEY_OVERHEAD {
        return Err(Error::InvalidArgument(format!(
            "passkey length {length} is below the fixed overhead of {PASSKEY_OVERHEAD} tokens"
        )));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::InvalidArgument(format!("depth {depth} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, 0x9A55);
    let mut passkey = [0u8; PASSKEY_DIGITS];
    passkey.iter_mut().for_each(|d| *d = rng.gen_range(0..10));
    let n_fill = length - PASSKEY_OVERHEAD;
    let before = (depth * n_fill as f64).round() as usize;
    let fill = filler.fill(&mut rng, n_fill);

    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    tokens.extend_from_slice(&fill[..before]);
    tokens.push(KEY);
    let start = tokens.len();
    tokens.extend(passkey.iter().map(|d| digit_token(*d)));
    let answer_span = (start, tokens.len());
    tokens.extend_from_slice(&fill[before..]);
    tokens.push(QUERY);
    let q = tokens.len();
    tokens.extend(passkey.iter().map(|d| digit_token(*d)));
    debug_assert_eq!(tokens.len(), length);
    Ok(PasskeySample {
        tokens,
        answer_span,
        query_span: (q, length),
        depth,
        length,
        passkey,
    })
}

/// `BOS pattern DELIM pattern pattern …` up to `length` tokens; the loss
/// mask covers every prediction after DELIM.
pub fn gen_copy(seed: u64, length: usize, pattern_len: usize) -> Result<Sequence> {
    if pattern_len == 0 || 2 * pattern_len >= length {
        return Err(Error::InvalidArgument(format!(
            "pattern_len must be in 1..{} for length {length}",
            length.div_ceil(2)
        )));
    }
    let mut rng = rng::stream(seed, 0xC0B1);
    let pattern: Vec<u32> = (0..pattern_len)
        .map(|_| rng.gen_range(DIGIT0..SYMBOLIC_VOCAB as u32))
        .collect();
    let mut tokens = vec![BOS];
    tokens.extend_from_slice(&pattern);
    tokens.push(DELIM);
    let delim = tokens.len() - 1;
    let mut k = 0;
    while tokens.len() < length {
        tokens.push(pattern[k % pattern_len]);
        k += 1;
    }
    let mask = (0..length - 1).map(|t| t >= delim).collect();
    Ok(Sequence {
        tokens,
        loss_mask: Some(mask),
    })
}

/// Raw bytes of a file as tokens in `0..256`.
pub fn load_text_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.into_iter().map(u32::from).collect())
}

/// Several files concatenated, optionally separated by a boundary token.
pub fn load_text_corpora(paths: &[&Path], boundary: Option<u32>) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (k, p) in paths.iter().enumerate() {
        if k > 0 {
            out.extend(boundary);
        }
        out.extend(load_text_corpus(p)?);
    }
    Ok(out)
}

/// Passkey accuracy on a `lengths × depths` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `accuracy[i][j]` for `lengths[i]`, `depths[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub solved: Vec<Vec<bool>>,
    pub n_per_cell: usize,
}

impl PasskeyGrid {
    pub fn solved_count(&self) -> usize {
        self.solved.iter().flatten().filter(|s| **s).count()
    }

    /// Solved cells for one length.
    pub fn solved_at(&self, length: usize) -> Option<usize> {
        let i = self.lengths.iter().position(|l| *l == length)?;
        Some(self.solved[i].iter().filter(|s| **s).count())
    }

    fn csv_with<F: Fn(usize, usize) -> String>(&self, cell: F) -> String {
        let mut out = String::from("length");
        for d in &self.depths {
            out.push_str(&format!(",depth_{d}"));
        }
        out.push('\n');
        for (i, l) in self.lengths.iter().enumerate() {
            out.push_str(&l.to_string());
            for j in 0..self.depths.len() {
                out.push(',');
                out.push_str(&cell(i, j));
            }
            out.push('\n');
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        self.csv_with(|i, j| format!("{:.6}", self.accuracy[i][j]))
    }

    pub fn solved_csv(&self) -> String {
        self.csv_with(|i, j| self.solved[i][j].to_string())
    }
}

/// Seed of the `k`-th evaluation sample in a grid cell.
pub fn passkey_cell_seed(seed: u64, length: usize, depth_index: usize, k: usize) -> u64 {
    rng::mix(rng::mix(rng::mix(seed, length as u64), depth_index as u64), k as u64)
}

/// True when greedy decoding after QUERY reproduces all five digits.
///
/// Greedy decoding only feeds back its own predictions, so it reproduces the
/// code exactly when every answer position, conditioned on the correct
/// previous digits, has the correct digit as its argmax. That is checked
/// with a single forward pass.
pub fn passkey_correct(model: &ToyModel, sample: &PasskeySample, scales: &[Scales]) -> Result<bool> {
    let (q0, q1) = sample.query_span;
    let out = model.forward(&sample.tokens[..q1 - 1], Some(scales))?;
    Ok((q0..q1).all(|pos| {
        let row = out.logits.row(pos - 1);
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if *v > best.1 { (k, *v) } else { best })
            .0;
        argmax as u32 == sample.tokens[pos]
    }))
}

/// Accuracy per cell; a cell is solved when all `n_per_cell` samples are
/// retrieved. Cells run in parallel and are assembled in grid order.
pub fn passkey_grid_eval(
    model: &ToyModel,
    lengths: &[usize],
    depths: &[f64],
    n_per_cell: usize,
    scales: &[Scales],
    filler: &FillerSource,
    seed: u64,
) -> Result<PasskeyGrid> {
    if n_per_cell == 0 {
        return Err(Error::InvalidArgument("n_per_cell must be positive".into()));
    }
    let cells: Vec<(usize, usize)> = (0..lengths.len()).flat_map(|i| (0..depths.len()).map(move |j| (i, j))).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut hits = 0;
            for k in 0..n_per_cell {
                let s = gen_passkey(passkey_cell_seed(seed, lengths[i], j, k), lengths[i], depths[j], filler)?;
                hits += passkey_correct(model, &s, scales)? as usize;
            }
            Ok(hits)
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut accuracy = vec![vec![0.0; depths.len()]; lengths.len()];
    let mut solved = vec![vec![false; depths.len()]; lengths.len()];
    for (&(i, j), hits) in cells.iter().zip(results) {
        accuracy[i][j] = hits as f64 / n_per_cell as f64;
        solved[i][j] = hits == n_per_cell;
    }
    Ok(PasskeyGrid {
        lengths: lengths.to_vec(),
        depths: depths.to_vec(),
        accuracy,
        solved,
        n_per_cell,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModelConfig, VariantKind};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn babble() -> FillerSource {
        FillerSource::Babble(Babble::new(1))
    }

    #[test]
    fn babble_is_deterministic_and_in_range() {
        let b = Babble::new(3);
        let a = b.generate(2000, 9);
        assert_eq!(a, Babble::new(3).generate(2000, 9));
        assert_ne!(a, b.generate(2000, 10));
        assert!(a.iter().all(|t| (FIRST_WORD..FIRST_WORD + NUM_WORDS).contains(t)));
        let seq = b.lm_sequence(100, 1);
        assert_eq!(seq.tokens[0], BOS);
        assert_eq!(seq.tokens.len(), 100);
    }

    #[test]
    fn passkey_depth_zero_follows_preamble() {
        let s = gen_passkey(1, 64, 0.0, &babble()).unwrap();
        assert_eq!(s.tokens[0], BOS);
        assert_eq!(s.tokens[1], KEY);
        assert_eq!(s.answer_span, (2, 7));
    }

    #[test]
    fn passkey_mid_depth_window() {
        let s = gen_passkey(4, 512, 0.5, &babble()).unwrap();
        let start = s.answer_span.0 as f64;
        assert!((0.45 * 512.0..=0.55 * 512.0).contains(&start), "{start}");
        assert_eq!(s.tokens.len(), 512);
        assert_eq!(s.tokens[s.query_span.0 - 1], QUERY);
    }

    #[test]
    fn passkey_is_reproducible_and_rejects_short() {
        let f = babble();
        assert_eq!(gen_passkey(8, 100, 0.3, &f).unwrap(), gen_passkey(8, 100, 0.3, &f).unwrap());
        assert!(gen_passkey(8, PASSKEY_OVERHEAD - 1, 0.3, &f).is_err());
        assert!(gen_passkey(8, 100, 1.5, &f).is_err());
        let s = gen_passkey(8, PASSKEY_OVERHEAD, 1.0, &f).unwrap();
        assert_eq!(s.tokens.len(), PASSKEY_OVERHEAD);
    }

    #[test]
    fn passkey_mask_covers_answer_only() {
        let s = gen_passkey(2, 40, 0.7, &babble()).unwrap();
        let seq = s.to_sequence();
        let mask = seq.loss_mask.unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), PASSKEY_DIGITS);
        assert!(mask[38] && mask[34] && !mask[33]);
    }

    #[test]
    fn text_filler() {
        let f = FillerSource::from_text_bytes(b"hello world").unwrap();
        let s = gen_passkey(1, 50, 0.5, &f).unwrap();
        assert_eq!(s.decode(s.answer_span).unwrap(), s.passkey.to_vec());
        assert!(FillerSource::from_text_bytes(b"").is_err());
    }

    #[test]
    fn copy_task() {
        let s = gen_copy(3, 20, 1).unwrap();
        assert_eq!(s.tokens[2], DELIM);
        assert!(s.tokens[3..].iter().all(|t| *t == s.tokens[1]));
        assert_eq!(gen_copy(3, 20, 4).unwrap(), gen_copy(3, 20, 4).unwrap());
        assert!(gen_copy(3, 20, 10).is_err());
        assert!(gen_copy(3, 20, 0).is_err());
        let s = gen_copy(5, 30, 4).unwrap();
        let mask = s.loss_mask.as_ref().unwrap();
        assert!(!mask[4] && mask[5]);
        assert_eq!(s.tokens[6..10], s.tokens[1..5]);
        for t in 10..30 {
            assert_eq!(s.tokens[t], s.tokens[t - 4]);
        }
    }

    #[test]
    fn copy_patterns_differ_across_seeds() {
        // 60 symbols, pattern length 3: a collision among 200 seeds is unlikely
        let patterns: HashSet<Vec<u32>> = (0..200).map(|s| gen_copy(s, 16, 3).unwrap().tokens[1..4].to_vec()).collect();
        assert!(patterns.len() >= 195);
    }

    #[test]
    fn corpus_loading() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, b"").unwrap();
        assert!(load_text_corpus(&empty).unwrap().is_empty());
        let kib = dir.path().join("kib.txt");
        std::fs::write(&kib, vec![b'a'; 1024]).unwrap();
        let a = load_text_corpus(&kib).unwrap();
        assert_eq!(a.len(), 1024);
        assert_eq!(a, load_text_corpus(&kib).unwrap());
        let both = load_text_corpora(&[&kib, &kib], Some(0)).unwrap();
        assert_eq!(both.len(), 2049);
        assert!(load_text_corpus(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn untrained_grid() {
        let m = ToyModel::build(&ToyModelConfig {
            vocab_size: SYMBOLIC_VOCAB,
            d_model: 8,
            d_state: 2,
            layers: 1,
            variant: VariantKind::Mamba,
            heads: 1,
            train_length: 32,
            seed: 0,
            ..Default::default()
        })
        .unwrap();
        let g = passkey_grid_eval(&m, &[32, 64], &[0.1, 0.5, 0.9], 4, &m.identity_scales(), &babble(), 1).unwrap();
        assert_eq!(g.accuracy.len(), 2);
        assert!(g.accuracy.iter().all(|r| r.len() == 3));
        assert!(g.accuracy.iter().flatten().all(|a| *a < 0.5));
        for (a, s) in g.accuracy.iter().flatten().zip(g.solved.iter().flatten()) {
            assert!(!*s || *a == 1.0);
        }
        assert_eq!(g.accuracy_csv().lines().count(), 3);
        assert!(g.solved_csv().starts_with("length,depth_0.1,depth_0.5,depth_0.9\n"));
    }

    proptest! {
        #[test]
        fn passkey_decodes_back(seed in 0u64..10_000, length in PASSKEY_OVERHEAD..300, depth in 0.0f64..=1.0) {
            let s = gen_passkey(seed, length, depth, &babble()).unwrap();
            prop_assert_eq!(s.tokens.len(), length);
            prop_assert_eq!(s.decode(s.answer_span).unwrap(), s.passkey.to_vec());
            prop_assert_eq!(s.decode(s.query_span).unwrap(), s.passkey.to_vec());
            prop_assert_eq!(s.tokens[s.answer_span.0 - 1], KEY);
        }
    }
}
