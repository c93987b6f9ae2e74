use std::process::ExitCode;

use clap::Parser;
use hireg_cli::{run, Cli, EXIT_VALIDATION};

fn main() -> ExitCode {
    // Usage errors share the validation code; clap's own default (2) means no consensus here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var("HIREG_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("hireg: HIREG_THREADS: {e}");
                }
            }
            _ => {
                eprintln!("hireg: HIREG_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(EXIT_VALIDATION);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hireg: {f}");
            ExitCode::from(f.code)
        }
    }
}
