//! The `hgn` command line: coarsening, data generation, training,
//! evaluation and parameter counting.

pub mod commands;
pub mod config;
pub mod hierarchy_files;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Source};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_COARSEN: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_COMPAT: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(EXIT_PARSE, message)
    }

    pub fn compat(message: impl Into<String>) -> Self {
        Self::new(EXIT_COMPAT, message)
    }
}

impl From<hgn_core::Error> for CliError {
    fn from(e: hgn_core::Error) -> Self {
        use hgn_core::Error as E;
        let code = match &e {
            E::UnreachableTarget { .. } => EXIT_COARSEN,
            E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => EXIT_NUMERIC,
            _ => EXIT_PARSE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::parse(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::parse(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "hgn", version, about = "Hierarchical graph networks for 3D pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coarsen a mesh graph into a hierarchy directory.
    #[command(args_override_self = true)]
    Coarsen(Flags),
    /// Generate a synthetic dataset.
    #[command(args_override_self = true)]
    GenData(Flags),
    /// Train a model and write a checkpoint plus a per-epoch report.
    #[command(args_override_self = true)]
    Train(Flags),
    /// Evaluate a checkpoint on a dataset.
    #[command(args_override_self = true)]
    Eval(Flags),
    /// Print parameter counts of model variants.
    #[command(args_override_self = true)]
    ParamCount(Flags),
    /// Print the effective configuration.
    #[command(args_override_self = true)]
    Config(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Config file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    gconv: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long = "lambda-m")]
    lambda_m: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "n-samples")]
    n_samples: Option<String>,
    #[arg(long)]
    targets: Option<String>,
    /// Input edge list for `coarsen`; the built-in body mesh when absent.
    #[arg(long)]
    graph: Option<String>,
    #[arg(long)]
    hierarchy: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    report: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
    /// Average predictions with those of the mirrored input.
    #[arg(long = "flip-eval")]
    flip_eval: bool,
}

impl Flags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
            cfg.merge_text(&text, Source::File)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v, Source::Flag)?;
        }
        let named = [
            ("seed", &self.seed),
            ("variant", &self.variant),
            ("gconv", &self.gconv),
            ("channels", &self.channels),
            ("lambda_m", &self.lambda_m),
            ("epochs", &self.epochs),
            ("n_samples", &self.n_samples),
            ("targets", &self.targets),
            ("graph", &self.graph),
            ("hierarchy", &self.hierarchy),
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
            ("report", &self.report),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, v, Source::Flag)?;
            }
        }
        if self.flip_eval {
            cfg.set("flip_eval", "true", Source::Flag)?;
        }
        Ok(())
    }
}

/// Runs one command and returns its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let text = e.render().to_string();
            let _ = if shown { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return if shown { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let flags = match &command {
        Command::Coarsen(f)
        | Command::GenData(f)
        | Command::Train(f)
        | Command::Eval(f)
        | Command::ParamCount(f)
        | Command::Config(f) => f,
    };
    let mut cfg = RunConfig::default();
    if let Command::Eval(_) = command {
        // Evaluation inherits the training run's settings before the file
        // and flags are applied, so it needs the checkpoint path first.
        let mut probe = RunConfig::default();
        flags.apply(&mut probe)?;
        let ckpt = commands::load_checkpoint(probe.str("checkpoint"))?;
        cfg.inherit(&ckpt.config);
        flags.apply(&mut cfg)?;
        return commands::eval(&cfg, ckpt, out);
    }
    flags.apply(&mut cfg)?;
    match command {
        Command::Coarsen(_) => commands::coarsen(&cfg, out),
        Command::GenData(_) => commands::gen_data(&cfg, out),
        Command::Train(_) => commands::train(&cfg, out),
        Command::ParamCount(_) => commands::param_count(&cfg, out),
        Command::Config(_) => {
            out.write_all(cfg.to_text().as_bytes())?;
            Ok(())
        }
        Command::Eval(_) => unreachable!("handled above"),
    }
}
