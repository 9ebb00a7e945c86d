mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Short machine-readable category for the first recognizable cause.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use difflm::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) => "io",
                E::Corpus { .. }
                | E::UnknownSymbol { .. }
                | E::BadExample { .. }
                | E::TooLong { .. } => "data",
                E::Checkpoint(_) | E::Json(_) | E::UnknownParameter(_) => "checkpoint",
                E::ZeroSteps | E::Timestep { .. } | E::TimestepMismatch { .. } => "schedule",
                _ => "model",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "config"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = err
                .chain()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(": ")
                .replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
