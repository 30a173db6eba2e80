//! Command-line front end: argument parsing, run configuration and the
//! train / eval / temp / ablate-t / gen-data commands.

pub mod args;
pub mod commands;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;

use clap::Parser;

use calibforge_core::Error;

pub use args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

pub fn execute(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        args::Command::Train(a) => commands::cmd_train(a),
        args::Command::Eval(a) => commands::cmd_eval(a),
        args::Command::Temp(a) => commands::cmd_temp(a),
        args::Command::AblateT(a) => commands::cmd_ablate_t(a),
        args::Command::GenData(a) => commands::cmd_gen_data(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
