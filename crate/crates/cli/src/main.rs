//! `dloral`: dataset generation, training, inference, evaluation and
//! gradient diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dloral_core::error::Error as CoreError;
use dloral_core::trainer::TrainMode;

use crate::config::RunConfig;

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// NaN output or a failed diagnostic.
#[derive(Debug)]
pub struct NumericalError(pub String);

impl std::fmt::Display for NumericalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalError {}

#[derive(Parser, Debug)]
#[command(name = "dloral", version, about = "Dual-adapter one-step video restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Precedence, lowest first: built-in
/// defaults, `--config`, `--set`, `DLORAL_SEED`/`--seed`, dedicated flags.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON file with any subset of the config keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed.
    #[arg(long, env = "DLORAL_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for s in &self.set {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageSel {
    Consistency,
    Enhancement,
    Both,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|_| "expected one of dual_lora, joint_single, iterative_single".to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize consistency and enhancement training splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; splits go to `<out>/consistency` and `<out>/enhancement`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageSel,
        #[arg(long)]
        n_sequences: Option<usize>,
    },
    /// Train adapters on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for the log and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// dual_lora, joint_single or iterative_single.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        n_cons: Option<usize>,
        #[arg(long)]
        n_enh: Option<usize>,
        #[arg(long)]
        n_total: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from the newest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Restore a sequence (or every sequence of a dataset split).
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PNG frame directory, DLT1 tensor, dataset item directory or split directory.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run adapters as separate branches instead of merging them first.
        #[arg(long)]
        no_merge: bool,
    },
    /// Compute quality and temporal-consistency metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predicted frames: a sequence, or a directory of sequences.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Reference frames laid out like `--pred`; omit for no-reference metrics.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write temporal profiles, e.g. `row=16` or `col=8`; repeatable.
        #[arg(long, value_name = "AXIS=INDEX")]
        profile: Vec<String>,
    },
    /// Run gradient checks and model invariants.
    Diag {
        #[command(flatten)]
        common: Common,
        /// Write the report into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt one operator's backward pass (harness self-test).
        #[arg(long, value_name = "OP")]
        fault: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Fold both adapter sets into the backbone of a checkpoint.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, out, stage, n_sequences } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.out, out);
            if let Some(n) = n_sequences {
                cfg.n_sequences = n;
            }
            commands::gen_data(&cfg, stage)
        }
        Command::Train { common, data, out, mode, n_cons, n_enh, n_total, lr, resume } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.data, data);
            override_opt(&mut cfg.out, out);
            if let Some(m) = mode {
                cfg.mode = m;
            }
            for (slot, v) in [(&mut cfg.n_cons, n_cons), (&mut cfg.n_enh, n_enh), (&mut cfg.n_total, n_total)] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            commands::train(&cfg, resume)
        }
        Command::Infer { common, checkpoint, input, out, no_merge } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.checkpoint, checkpoint);
            override_opt(&mut cfg.input, input);
            override_opt(&mut cfg.out, out);
            commands::infer(&cfg, no_merge)
        }
        Command::Eval { common, pred, gt, out, profile } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.pred, pred);
            override_opt(&mut cfg.gt, gt);
            override_opt(&mut cfg.out, out);
            let profiles = profile.iter().map(|p| commands::parse_profile(p)).collect::<anyhow::Result<Vec<_>>>()?;
            commands::eval(&cfg, &profiles)
        }
        Command::Diag { common, out, fault, tolerance } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.out, out);
            commands::diag(&cfg, fault.as_deref(), tolerance)
        }
        Command::Merge { common, checkpoint, out } => {
            let mut cfg = common.resolve()?;
            override_opt(&mut cfg.checkpoint, checkpoint);
            override_opt(&mut cfg.out, out);
            commands::merge(&cfg)
        }
    }
}

fn override_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericalError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::NonFinite(_) => 2,
                CoreError::Io(_) | CoreError::Image(_) | CoreError::Format(_) | CoreError::Json(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
