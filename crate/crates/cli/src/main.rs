use std::process::ExitCode;

use clap::Parser;
use histodyn_cli::args::Cli;
use histodyn_cli::commands::run;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.command.shared().workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
