//! `dart3`: camera-aware test-time adaptation over stored embeddings.

mod cli;
mod commands;
mod config;

use clap::Parser;

use dart3_core::error::Error;

use crate::cli::{Cli, Command};

/// Exit codes: 0 success, 2 usage, 3 I/O, 4 data/consistency, 5 numeric.
fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Format(_)
        | Error::Consistency(_)
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Label(_)
        | Error::Degenerate(_)
        | Error::Parse(_) => 4,
        Error::Numeric(_) => 5,
    }
}

fn main() {
    let parsed = Cli::parse();
    let result = match &parsed.command {
        Command::Gen { common, args } => commands::cmd_gen(common, args),
        Command::InitStats { common, args } => commands::cmd_init_stats(common, args),
        Command::Adapt { common, args } => commands::cmd_adapt(common, args),
        Command::Eval { common, args } => commands::cmd_eval(common, args),
        Command::Sweep { common, args } => commands::cmd_sweep(common, args),
        Command::Curve { common, args } => commands::cmd_curve(common, args),
    };
    if let Err(error) = result {
        eprintln!("error: {error}");
        std::process::exit(exit_code(&error));
    }
}
