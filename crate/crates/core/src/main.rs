use std::process::ExitCode;

use clap::Parser;
use dcbd::cli::{execute, exit_code, init_logging, Cli};
use dcbd::Error;

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::AlgebraicLoop(cycles) = &e {
                for c in cycles {
                    eprintln!("  cycle: {}", c.join(" -> "));
                }
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
