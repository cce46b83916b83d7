//! `freespace` command-line driver.
//!
//! stdout carries line-delimited JSON records only; progress, tables and
//! errors go to stderr. Exit codes:
//!
//! | code | meaning                                              |
//! |------|------------------------------------------------------|
//! | 0    | success                                              |
//! | 1    | invalid arguments or configuration                   |
//! | 2    | output directory not writable, or input path missing |
//! | 3    | malformed input record (log, PGM, manifest, config)  |
//! | 4    | checkpoint missing                                   |
//! | 5    | training diverged                                    |

mod args;
mod commands;
mod exit;

use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let matches = match args::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    match commands::run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
