mod args;
mod commands;
mod config_file;
mod report;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

/// Exit 2 for bad flags or configs, 1 for everything that fails at run time.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let argv: Result<Vec<String>, _> = std::env::args_os().map(|a| a.into_string()).collect();
    let Ok(argv) = argv else {
        eprintln!("error: arguments must be valid UTF-8");
        return ExitCode::from(2);
    };
    let outcome = config_file::expand(argv).and_then(|argv| match Cli::try_parse_from(argv) {
        Ok(cli) => commands::run(cli.command),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Err(Failure::Usage(String::new()))
            } else {
                Ok(())
            }
        }
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
