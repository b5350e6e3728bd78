use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use diffdyn_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let mut log = io::stderr();
    let result = run(&cli, &mut out, &mut log);
    let flushed = out.flush();
    match result {
        Ok(exit) => {
            if let Err(e) = flushed {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
            ExitCode::from(exit.code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit.code())
        }
    }
}
