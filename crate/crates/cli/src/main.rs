//! xmatch: desk-scale cross-modal retrieval experiments from the shell.
//!
//! Subcommands cover the whole loop: generate paired synthetic data,
//! train the attention regulators, evaluate retrieval both ways,
//! average exported score tables, audit gradients against finite
//! differences, and identify any produced file.
//!
//! Exit codes are stable so scripts can branch on failure category:
//! 0 success, 2 configuration or usage, 3 failed gradient audit,
//! 4 unusable data, 5 malformed file, 1 anything else.

mod commands;
mod dataset;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "xmatch",
    version,
    about = "Cross-modal image-text matching: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset
    GenSynthetic(commands::gen::GenArgs),
    /// Optimize regulator parameters on a data directory
    Train(commands::train::TrainArgs),
    /// Retrieval metrics from a checkpoint or an exported score table
    Eval(commands::eval::EvalArgs),
    /// Average two score tables pair by pair
    Ensemble(commands::ensemble::EnsembleArgs),
    /// Compare analytic gradients against finite differences
    GradCheck(commands::gradcheck::GradCheckArgs),
    /// Identify and summarize any file this tool produces
    Inspect(commands::inspect::InspectArgs),
}

fn main() -> ExitCode {
    // Die quietly when stdout is a closed pipe (`xmatch inspect x | head`)
    // instead of panicking on the failed write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => commands::gen::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Ensemble(args) => commands::ensemble::run(args),
        Command::GradCheck(args) => commands::gradcheck::run(args),
        Command::Inspect(args) => commands::inspect::run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(category(&err))
        }
    }
}

/// Stable exit code for an error, by the first library error category
/// found in its chain.
fn category(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<xmatch_core::Error>() {
            return match e {
                xmatch_core::Error::Config(_) => 2,
                xmatch_core::Error::GradCheck(_) => 3,
                xmatch_core::Error::Data(_) | xmatch_core::Error::Domain(_) => 4,
                xmatch_core::Error::Format(_) => 5,
                _ => 1,
            };
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_categories_map_to_documented_exit_codes() {
        let config: anyhow::Error = xmatch_core::Error::config("x").into();
        let data: anyhow::Error = xmatch_core::Error::data("x").into();
        let format: anyhow::Error = xmatch_core::Error::format("x").into();
        let domain: anyhow::Error = xmatch_core::Error::domain("x").into();
        let grad: anyhow::Error = xmatch_core::Error::GradCheck("x".into()).into();
        let io: anyhow::Error =
            xmatch_core::Error::Io(std::io::Error::new(std::io::ErrorKind::Other, "x")).into();
        assert_eq!(category(&config), 2);
        assert_eq!(category(&data), 4);
        assert_eq!(category(&format), 5);
        assert_eq!(category(&domain), 4);
        assert_eq!(category(&grad), 3);
        assert_eq!(category(&io), 1);
        assert_eq!(category(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn context_wrapping_preserves_the_category() {
        use anyhow::Context;
        let err: anyhow::Error = xmatch_core::Error::data("bad row").into();
        let wrapped = Err::<(), _>(err)
            .context("loading features")
            .context("running eval")
            .unwrap_err();
        assert_eq!(category(&wrapped), 4);
    }

    #[test]
    fn cli_definition_is_internally_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
