//! Experiment configuration: one TOML document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssmlab_core::calibration::{CalibrationConfig, Granularity, Target};
use ssmlab_core::model::{AdamConfig, ToyModelConfig, TrainConfig};
use ssmlab_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Topic-switching bigram language over the symbolic vocabulary.
    Babble,
    /// Passkey retrieval with babble (or text) filler.
    Passkey,
    /// Copy a random prefix pattern after a delimiter.
    Copy,
    /// Byte-level text from local files.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Seed of the babble grammar; runs with different seeds share it.
    pub grammar_seed: u64,
    pub switch_prob: f64,
    /// Text files for `text` (and optional passkey filler).
    pub text_paths: Vec<PathBuf>,
    /// Token inserted between concatenated text files.
    pub boundary: Option<u32>,
    pub pattern_len: usize,
    /// Fraction of a text corpus held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Babble,
            grammar_seed: 7,
            switch_prob: 1.0 / 300.0,
            text_paths: Vec::new(),
            boundary: None,
            pattern_len: 16,
            eval_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    Spsa,
    Grad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorInit {
    /// Uniform on `(0.001, 1]`.
    Uniform,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub method: CalibrationMethod,
    pub granularity: Granularity,
    pub init: FactorInit,
    pub c: f64,
    pub eta: f64,
    pub iterations: usize,
    pub target_length: usize,
    /// Number of calibration sequences.
    pub samples: usize,
    /// In `compare`, calibrate separately at every evaluation length instead
    /// of once at `target_length`.
    pub per_length: bool,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let d = CalibrationConfig::default();
        Self {
            method: CalibrationMethod::Spsa,
            granularity: Granularity::PerLayer,
            init: FactorInit::Uniform,
            c: d.c,
            eta: d.eta,
            iterations: d.iterations,
            target_length: 2048,
            samples: 20,
            per_length: false,
        }
    }
}

impl CalibrationSection {
    pub fn optimizer(&self, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            c: self.c,
            eta: self.eta,
            iterations: self.iterations,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub lengths: Vec<usize>,
    pub max_windows: usize,
    pub passkey_lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub n_per_cell: usize,
    /// Factor used by the constant-scaling strategies of `compare`.
    pub constant_factor: f64,
    /// Sequences used by the state-norm table.
    pub norm_sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096],
            max_windows: 8,
            passkey_lengths: vec![256, 512, 1024, 2048, 4096],
            depths: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            n_per_cell: 20,
            constant_factor: 2.0,
            norm_sequences: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BVariance {
    /// Row covariance `I/(2d)`.
    HalfOverD,
    /// Row covariance `I/√d`.
    InvSqrtD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormlabSection {
    pub d: usize,
    pub m: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub t_max: usize,
    pub trials: usize,
    pub b_variance: BVariance,
}

impl Default for NormlabSection {
    fn default() -> Self {
        Self {
            d: 512,
            m: 512,
            lambda_min: 0.5,
            lambda_max: 0.9,
            t_max: 5000,
            trials: 64,
            b_variance: BVariance::HalfOverD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives the model init, every data stream, and the optimizers.
    pub seed: u64,
    pub model: ToyModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationSection,
    pub eval: EvalSection,
    pub normlab: NormlabSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig {
                optimizer: AdamConfig::default(),
                ..TrainConfig::default()
            },
            calibration: CalibrationSection::default(),
            eval: EvalSection::default(),
            normlab: NormlabSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text; errors carry the line and column from the parser.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The model config with the experiment seed applied.
    pub fn model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let ascending = |v: &[usize]| !v.is_empty() && v[0] > 0 && v.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&self.eval.lengths) || !ascending(&self.eval.passkey_lengths) {
            return Err(Error::Config("eval lengths must be non-empty, positive and strictly ascending".into()));
        }
        if self.eval.depths.is_empty() || self.eval.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Config("eval.depths must be non-empty and within [0, 1]".into()));
        }
        if self.eval.n_per_cell == 0 || self.eval.max_windows == 0 || self.eval.norm_sequences == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        if !(self.eval.constant_factor > 0.0 && self.eval.constant_factor.is_finite()) {
            return Err(Error::Config("eval.constant_factor must be positive".into()));
        }
        if self.calibration.samples == 0 || self.calibration.target_length < 2 {
            return Err(Error::Config("calibration needs samples >= 1 and target_length >= 2".into()));
        }
        self.calibration.optimizer(self.seed).validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.task.switch_prob) {
            return Err(Error::Config("task.switch_prob must be within [0, 1]".into()));
        }
        let needs_text = self.task.kind == TaskKind::Text;
        if needs_text && self.task.text_paths.is_empty() {
            return Err(Error::Config("task.kind = \"text\" needs task.text_paths".into()));
        }
        for p in &self.task.text_paths {
            if !p.exists() {
                return Err(Error::Config(format!("task.text_paths: {} does not exist", p.display())));
            }
        }
        if needs_text && self.model.vocab_size < 256 {
            return Err(Error::Config("byte-level text needs model.vocab_size >= 256".into()));
        }
        if matches!(self.task.kind, TaskKind::Babble | TaskKind::Passkey | TaskKind::Copy)
            && self.model.vocab_size < ssmlab_core::data::SYMBOLIC_VOCAB
        {
            return Err(Error::Config(format!(
                "symbolic tasks need model.vocab_size >= {}",
                ssmlab_core::data::SYMBOLIC_VOCAB
            )));
        }
        if !(0.0..1.0).contains(&self.task.eval_fraction) {
            return Err(Error::Config("task.eval_fraction must be within [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scaling target as accepted on the command line.
pub fn parse_target(s: &str) -> std::result::Result<Target, String> {
    match s.to_ascii_lowercase().as_str() {
        "a" => Ok(Target::A),
        "delta" | "dt" => Ok(Target::Delta),
        other => Err(format!("unknown target {other:?}; expected \"a\" or \"delta\"")),
    }
}
