use std::process::ExitCode;

use clap::Parser;
use diaformer_cli::commands::{self, Cli, Command};

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(a) => commands::train(&a)?,
        Command::Eval(a) => println!("{}", commands::eval(&a)?),
        Command::GenerateData(a) => commands::generate(&a)?,
        Command::Gradcheck(a) => {
            let err = commands::gradcheck(&a)?;
            let ok = err < a.tolerance;
            println!("max relative error {err:.3e} ({})", if ok { "ok" } else { "FAILED" });
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve(a) => commands::serve(&a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
