//! Command-line workflows: synthesise a corpus, train, predict, evaluate, inspect.
//!
//! Every option can come from a flag, from a section of the TOML file given
//! with `--config`, or from the built-in default, in that order of precedence.
//! Each command writes `resolved_config.toml` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub mod commands;
mod corpus;

pub use commands::{EvaluateArgs, InspectArgs, PredictArgs, SynthArgs, TrainArgs};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "ultrasync", version, about = "Ultrasound tongue imaging / audio synchronisation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults; flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    pub strict_deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with known offsets.
    Synth(SynthArgs),
    /// Train the two-stream model on a corpus.
    Train(TrainArgs),
    /// Predict offsets for utterances.
    Predict(PredictArgs),
    /// Score predictions against the manifest.
    Evaluate(EvaluateArgs),
    /// Dump preprocessed frames, MFCCs and a summary for one bundle.
    Inspect(InspectArgs),
}

/// Top level of the `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strict_deterministic: Option<bool>,
    pub threads: Option<usize>,
    pub synth: SynthArgs,
    pub train: TrainArgs,
    pub predict: PredictArgs,
    pub evaluate: EvaluateArgs,
    pub inspect: InspectArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UserError(format!("config {}: {e}", path.display())).into())
    }
}

/// Options shared by every command after merging.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub strict_deterministic: bool,
    /// `None` means all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Not part of the snapshot, so identical runs into different
    /// directories leave identical files.
    #[serde(skip)]
    pub out: PathBuf,
}

/// A failure caused by the invocation rather than by the program. Exits with 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub(crate) fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// 1 for bad input, configuration or I/O; 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use ultrasync_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Shape(_) | E::TrainingDiverged { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

fn resolve_global(g: &GlobalArgs, file: &FileConfig, default_out: &str) -> Resolved {
    let strict = g.strict_deterministic || file.strict_deterministic.unwrap_or(false);
    Resolved {
        seed: g.seed.or(file.seed).unwrap_or(0),
        strict_deterministic: strict,
        threads: if strict { Some(1) } else { g.threads.or(file.threads) },
        out: g.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| default_out.into()),
    }
}

/// Writes `resolved_config.toml` into `dir`.
pub(crate) fn write_snapshot<T: Serialize>(dir: &Path, global: &Resolved, command: &str, args: &T) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        #[serde(flatten)]
        global: &'a Resolved,
        options: &'a T,
    }
    let text = toml::to_string(&Snapshot {
        command,
        global,
        options: args,
    })
    .context("serialising resolved config")?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let default_out = match cli.command {
        Command::Synth(_) => "corpus",
        Command::Train(_) => "run",
        Command::Predict(_) => "predictions",
        Command::Evaluate(_) => "evaluation",
        Command::Inspect(_) => "inspect",
    };
    let global = resolve_global(&cli.global, &file, default_out);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(user("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker pool")?;
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth::run(&global, a.merge(file.synth)),
        Command::Train(a) => commands::train::run(&global, a.merge(file.train)),
        Command::Predict(a) => commands::predict::run(&global, a.merge(file.predict)),
        Command::Evaluate(a) => commands::evaluate::run(&global, a.merge(file.evaluate)),
        Command::Inspect(a) => commands::inspect::run(&global, a.merge(file.inspect)),
    })
}

/// Field-wise `flag.or(file)` for the listed fields.
macro_rules! merge_fields {
    ($ty:ident { $($f:ident),* $(,)? } $(, flags { $($b:ident),* })?) => {
        impl $ty {
            pub fn merge(self, file: $ty) -> $ty {
                $ty {
                    $($f: self.$f.or(file.$f),)*
                    $($($b: self.$b || file.$b,)*)?
                }
            }
        }
    };
}
pub(crate) use merge_fields;
