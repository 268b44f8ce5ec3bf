use std::process::ExitCode;

use clap::Parser;
use nmn_core::Error;

mod commands;

use commands::{Cli, Command};

/// Exit status for a failed command: 2 for bad usage or malformed input,
/// 1 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Diverged(_) | Error::NotForwarded => 1,
        _ => 2,
    }
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite(_) => "non-finite",
        Error::MissingInput(_) => "missing",
        Error::NotForwarded => "internal",
        Error::InvalidArgument(_) => "invalid",
        Error::Diverged(_) => "diverged",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn one_line(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad usage");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Embed(a) => commands::embed(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", category(&e), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
