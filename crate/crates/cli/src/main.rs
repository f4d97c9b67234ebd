mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Process exit status; the numbers are a stable contract for scripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Invalid = 1,
    Numerical = 2,
    NotConverged = 3,
}

/// A failure with the status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

impl From<mfpca::Error> for Failure {
    fn from(e: mfpca::Error) -> Self {
        use mfpca::Error::*;
        let status = match e {
            Numerical(_) | ElboDecrease { .. } | AllCandidatesFailed(_) => Status::Numerical,
            _ => Status::Invalid,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            status: Status::Invalid,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors, help and version are not errors
            return ExitCode::from(if e.use_stderr() { Status::Invalid as u8 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }

    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Select(a) => commands::select(a),
        Command::Predict(a) => commands::predict(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(status) => ExitCode::from(status as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.status as u8)
        }
    }
}
