//! Argument parsing and dispatch for the `ssmlab` binary.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssmlab_core::calibration::Target;
use ssmlab_core::{Error, Result};

use crate::commands;
use crate::config::ExperimentConfig;
use crate::run::{exit_code, RunDir, OUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "ssmlab", version, about = "Length-generalization experiments on toy selective state-space models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; every field is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Exact output directory (otherwise `<root>/<command>_<timestamp>_<seed>`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Root for generated output directories.
    #[arg(long, global = true, env = OUT_ROOT_ENV)]
    pub out_root: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override any config field, e.g. `--set model.layers=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    A,
    Delta,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::A => Target::A,
            TargetArg::Delta => Target::Delta,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Babble,
    Passkey,
    Copy,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model; writes model.ssmx and loss_curve.csv.
    Train {
        #[arg(long)]
        task: Option<TaskArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Eigenvalue heatmap of a checkpoint; writes spectrum.csv and spectrum_summary.csv.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// State-norm theory checks; with a checkpoint also writes state_norms.csv.
    Normlab {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        factors: Option<PathBuf>,
    },
    /// Calibrate scaling factors on a frozen checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long)]
        target_length: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Perplexity by context length; writes ppl.csv.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Passkey accuracy grid; writes passkey_accuracy.csv and passkey_solved.csv.
    EvalPasskey {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Baseline vs constant vs calibrated scaling of A and Δ; writes compare.csv.
    Compare {
        /// Trains a fresh model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Spectrum { .. } => "spectrum",
            Command::Normlab { .. } => "normlab",
            Command::Calibrate { .. } => "calibrate",
            Command::EvalPpl { .. } => "eval-ppl",
            Command::EvalPasskey { .. } => "eval-passkey",
            Command::Compare { .. } => "compare",
        }
    }

    /// Verb flags that map onto config fields, as `(dotted key, TOML value)`.
    fn config_overrides(&self) -> Vec<(&'static str, toml::Value)> {
        let int = |v: usize| toml::Value::Integer(v as i64);
        let list = |v: &[usize]| toml::Value::Array(v.iter().map(|x| int(*x)).collect());
        let mut out = Vec::new();
        match self {
            Command::Train { task, steps } => {
                if let Some(t) = task {
                    let name = t.to_possible_value().expect("no skipped variants").get_name().to_string();
                    out.push(("task.kind", toml::Value::String(name)));
                }
                if let Some(s) = steps {
                    out.push(("train.steps", int(*s)));
                }
            }
            Command::Calibrate {
                target_length,
                iterations,
                ..
            } => {
                if let Some(l) = target_length {
                    out.push(("calibration.target_length", int(*l)));
                }
                if let Some(k) = iterations {
                    out.push(("calibration.iterations", int(*k)));
                }
            }
            Command::EvalPpl { lengths: Some(l), .. } => out.push(("eval.lengths", list(l))),
            Command::EvalPasskey { lengths: Some(l), .. } => out.push(("eval.passkey_lengths", list(l))),
            _ => {}
        }
        out
    }

    /// Flags echoed into the manifest.
    fn manifest_args(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match self {
            Command::Spectrum { checkpoint } => put("checkpoint", Some(checkpoint.display().to_string())),
            Command::Normlab { checkpoint, factors } => {
                put("checkpoint", show(checkpoint));
                put("factors", show(factors));
            }
            Command::Calibrate { checkpoint, target, .. } => {
                put("checkpoint", Some(checkpoint.display().to_string()));
                put("target", Some(format!("{target:?}").to_lowercase()));
            }
            Command::EvalPpl { checkpoint, factors, .. } | Command::EvalPasskey { checkpoint, factors, .. } => {
                put("checkpoint", Some(checkpoint.display().to_string()));
                put("factors", show(factors));
            }
            Command::Compare { checkpoint } => put("checkpoint", show(checkpoint)),
            Command::Train { .. } => {}
        }
        m
    }
}

/// Set `dotted` (e.g. `model.layers`) inside `table`, creating sub-tables.
fn set_path(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {dotted:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{dotted}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// A `--set` value: any TOML literal, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// File values, then `--set` overrides, then dedicated flags.
pub fn resolve_config(global: &GlobalArgs, command: &Command) -> Result<ExperimentConfig> {
    let (text, origin) = match &global.config {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            p.display().to_string(),
        ),
        None => (String::new(), "defaults".to_string()),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    for kv in &global.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in command.config_overrides() {
        set_path(&mut table, k, v)?;
    }
    if let Some(seed) = global.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg = ExperimentConfig::from_toml(&toml::to_string(&table).expect("table serializes"), &origin)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(run: &mut RunDir, cfg: &ExperimentConfig, command: &Command) -> Result<()> {
    match command {
        Command::Train { .. } => commands::train(run, cfg).map(|_| ()),
        Command::Spectrum { checkpoint } => commands::spectrum(run, checkpoint),
        Command::Normlab { checkpoint, factors } => commands::normlab(run, cfg, checkpoint.as_deref(), factors.as_deref()),
        Command::Calibrate { checkpoint, target, .. } => commands::calibrate(run, cfg, checkpoint, (*target).into()),
        Command::EvalPpl { checkpoint, factors, .. } => commands::eval_ppl(run, cfg, checkpoint, factors.as_deref()),
        Command::EvalPasskey { checkpoint, factors, .. } => commands::eval_passkey(run, cfg, checkpoint, factors.as_deref()),
        Command::Compare { checkpoint } => commands::compare(run, cfg, checkpoint.as_deref()),
    }
}

/// Run one command and return the process exit code. The manifest is
/// written whenever an output directory could be created.
pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    pool.install(|| run_in_pool(&cli))
}

fn run_in_pool(cli: &Cli) -> i32 {
    let config = resolve_config(&cli.global, &cli.command);
    let seed = config.as_ref().map(|c| c.seed).unwrap_or(cli.global.seed.unwrap_or(0));
    let mut run = match RunDir::create(
        cli.command.name(),
        seed,
        cli.global.out_dir.as_deref(),
        cli.global.out_root.as_deref(),
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let (cfg, result) = match config {
        Ok(cfg) => {
            let r = dispatch(&mut run, &cfg, &cli.command);
            (Some(cfg), r)
        }
        Err(e) => (None, Err(e)),
    };
    let outcome = result.as_ref().map(|_| ());
    if let Err(e) = run.write_manifest(cfg.as_ref(), &cli.command.manifest_args(), outcome) {
        eprintln!("error: could not write manifest: {e}");
    }
    match result {
        Ok(()) => {
            println!("{}", run.path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskKind;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ssmlab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_and_set_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[model]\nlayers = 5\n[train]\nsteps = 10\n").unwrap();
        let p = path.to_str().unwrap();
        let cli = parse(&["--config", p, "--set", "model.layers=2", "--set", "train.steps=99", "train", "--steps", "7"]);
        let cfg = resolve_config(&cli.global, &cli.command).unwrap();
        assert_eq!((cfg.seed, cfg.model.layers, cfg.train.steps), (3, 2, 7));
        let cli = parse(&["--config", p, "--seed", "9", "train", "--task", "passkey"]);
        let cfg = resolve_config(&cli.global, &cli.command).unwrap();
        assert_eq!((cfg.seed, cfg.task.kind), (9, TaskKind::Passkey));
    }

    #[test]
    fn set_accepts_lists_and_strings() {
        let cli = parse(&["--set", "eval.lengths=[16, 32]", "--set", "calibration.method=grad", "normlab"]);
        let cfg = resolve_config(&cli.global, &cli.command).unwrap();
        assert_eq!(cfg.eval.lengths, vec![16, 32]);
        assert_eq!(cfg.calibration.method, crate::config::CalibrationMethod::Grad);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for args in [
            &["--set", "model.layers"][..],
            &["--set", "model.nonsense=1"][..],
            &["--set", "seed.x=1"][..],
        ] {
            let mut v = args.to_vec();
            v.push("normlab");
            let cli = parse(&v);
            assert!(matches!(resolve_config(&cli.global, &cli.command), Err(Error::Config(_))), "{args:?}");
        }
    }
}
