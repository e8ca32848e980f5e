use clap::Parser;
use heatsmooth_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => print!("{text}"),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}
