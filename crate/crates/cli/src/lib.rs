//! The `ctts` command line: corpus preparation, training, synthesis,
//! context-variation analysis and listening-test statistics.
//!
//! Exit codes: 0 on success, 1 on a usage error (usage text on stderr), 2
//! on a data or model error.

mod analyze;
mod common;
mod prepare;
mod stats;
mod synth;
mod train;

use std::ffi::OsString;
use std::io::{self, Write};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use common::UsageError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ctts", version, about = "Context-conditioned speech synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build bigram manifests, splits and the mel feature cache from a corpus
    Prepare(prepare::Args),
    /// Train a model on prepared data, writing checkpoints and JSONL metrics
    Train(train::Args),
    /// Synthesize one utterance from a checkpoint
    Synth(synth::Args),
    /// Synthesize one text under many contexts and measure the variation
    Analyze(analyze::Args),
    /// Listening-test statistics over CSV tables
    Stats(stats::Args),
}

/// The full argument grammar, for help rendering and introspection.
pub fn command() -> clap::Command {
    <Cli as clap::CommandFactory>::command()
}

/// Usage line of the deepest subcommand named in `args`.
fn usage_for(args: &[OsString]) -> String {
    let mut cmd = command();
    cmd.build();
    for a in args.iter().skip(1) {
        let Some(name) = a.to_str() else { break };
        match cmd.find_subcommand(name) {
            Some(sub) => cmd = sub.clone(),
            None if name.starts_with('-') => continue,
            None => break,
        }
    }
    cmd.render_usage().to_string()
}

/// Runs the command line with the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut io::stdout().lock(), &mut io::stderr().lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    if !text.contains("Usage:") {
                        let _ = writeln!(err, "\n{}", usage_for(&args));
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => prepare::run(&a, out, err),
        Command::Train(a) => train::run(&a, out, err),
        Command::Synth(a) => synth::run(&a, out, err),
        Command::Analyze(a) => analyze::run(&a, out, err),
        Command::Stats(a) => stats::run(&a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() => {
            let _ = writeln!(err, "error: {e}\n\n{}\n\nFor more information, try '--help'.", usage_for(&args));
            EXIT_USAGE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_DATA
        }
    }
}
