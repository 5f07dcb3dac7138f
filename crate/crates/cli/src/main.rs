use clap::Parser;
use tse_cli::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let outcome = run(Cli::parse())?;
    print!("{}", outcome.text);
    if !outcome.ok {
        std::process::exit(1);
    }
    Ok(())
}
