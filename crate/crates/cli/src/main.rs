mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about = "Semi-supervised tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that resolves a config.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file layered over the preset named by its `preset` key.
    #[arg(long, env = "TUMORSEG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pipeline.beta=0.85`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Window, slice, filter and partition NIfTI volumes into a corpus.
    Preprocess {
        /// Directory with `images/` and `labels/`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the pseudo-labelling loop on a corpus.
    Run(commands::RunArgs),
    /// Score a segmenter checkpoint on one split.
    Evaluate(commands::EvaluateArgs),
    /// Render plots for a finished or partial run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.to_string()),
    };
    let result: Result<(), commands::CliError> = match cli.command {
        Command::Synth {
            out,
            n,
            size,
            seed,
            force,
            cfg,
        } => commands::synth(&out, n, size, seed, force, &cfg).map_err(Into::into),
        Command::Preprocess {
            input,
            out,
            seed,
            force,
            cfg,
        } => commands::preprocess(&input, &out, seed, force, &cfg),
        Command::Run(args) => commands::run(&args).map_err(Into::into),
        Command::Evaluate(args) => commands::evaluate(&args).map_err(Into::into),
        Command::Report { run } => commands::report(&run).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({ "error": e.kind, "message": e.message });
            if !e.files.is_empty() {
                body["files"] = json!(e.files);
            }
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
    ExitCode::FAILURE
}
